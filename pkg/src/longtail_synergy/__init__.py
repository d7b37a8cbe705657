"""Long-tailed recognition with SCL, RSG and LDAM."""
