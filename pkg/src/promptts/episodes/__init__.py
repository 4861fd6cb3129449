"""Episode builders, forecast transforms, series pool and curriculum."""
