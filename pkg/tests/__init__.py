"""expmul-attention tests."""
