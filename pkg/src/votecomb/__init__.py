"""Neural system combination by hypothesis voting."""
