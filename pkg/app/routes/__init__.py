# Route package marker.
