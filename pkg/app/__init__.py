# App package marker.
