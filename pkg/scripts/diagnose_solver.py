#!/usr/bin/env python3
"""Quick solver diagnostics: environment, configuration and a tiny FE cross-check."""

from __future__ import annotations

import sys
import time

import numpy as np
import scipy
from dotenv import load_dotenv

from app.config import ConfigError, get_settings
from app.fem import FeModel, assemble_and_solve, dense_reference_solve, node_index
from app.volume import MaterialClass, MaterialField


def status_line(name: str, ok: bool, detail: str) -> None:
    prefix = "OK" if ok else "FAIL"
    print(f"[{prefix}] {name}: {detail}")


def _cube(n: int = 4) -> MaterialField:
    dims = (n, n, n)
    return MaterialField(
        dims=dims,
        spacing=(1.0, 1.0, 1.0),
        origin=(0.0, 0.0, 0.0),
        material_class=np.full(dims, MaterialClass.CANCELLOUS, dtype=np.uint8),
        modulus=np.linspace(500.0, 1500.0, n**3).reshape(dims),
    )


def main() -> int:
    load_dotenv()

    print(f"Python: {sys.version.split()[0]}")
    print(f"numpy: {np.__version__}  scipy: {scipy.__version__}")

    try:
        settings = get_settings()
    except ConfigError as exc:
        status_line("Config", False, str(exc))
        return 1
    status_line(
        "Config",
        True,
        f"tol={settings.solver_tol:.1e} max_iter={settings.solver_max_iter or 'auto'} threads={settings.threads}",
    )

    material = _cube()
    n = material.dims[0]
    ii, jj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    model = FeModel(
        material=material,
        loaded_nodes=node_index(material.dims, ii.ravel(), jj.ravel(), n),
        clamped_nodes=node_index(material.dims, ii.ravel(), jj.ravel(), 0),
    )

    started = time.perf_counter()
    try:
        result = assemble_and_solve(model, tol=settings.solver_tol, max_iter=settings.solver_max_iter or None)
    except Exception as exc:  # noqa: BLE001
        status_line("CG", False, f"{type(exc).__name__}: {exc}")
        return 2
    elapsed = time.perf_counter() - started
    status_line(
        "CG",
        True,
        f"dofs={result.stats.dof_count} iterations={result.stats.iterations} "
        f"residual={result.stats.relative_residual:.2e} in {elapsed:.3f}s",
    )

    reference = dense_reference_solve(model)
    error = float(np.linalg.norm(result.displacement - reference) / np.linalg.norm(reference))
    status_line("Dense check", error <= 1e-6, f"relative displacement difference {error:.2e}")

    reaction = result.reactions.sum(axis=0)
    balance = float(abs(reaction[2] + model.total_load[2]) / abs(model.total_load[2]))
    status_line("Equilibrium", balance <= 1e-6, f"reaction z={reaction[2]:.6f} N, imbalance {balance:.2e}")
    return 0 if error <= 1e-6 and balance <= 1e-6 else 3


if __name__ == "__main__":
    raise SystemExit(main())
