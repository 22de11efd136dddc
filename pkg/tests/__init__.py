"""Unit test package for pcbr."""
