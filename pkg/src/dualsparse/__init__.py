"""Bit-exact model of a dual-side-sparse spiking accelerator and its compression flow."""
