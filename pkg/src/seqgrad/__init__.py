"""Recurrent networks with hand-derived backpropagation through time."""
