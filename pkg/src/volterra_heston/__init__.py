"""Volterra Heston model toolkit."""
