"""Numerical core: functions, Haar analysis, homeomorphisms, signs, random homeomorphisms and reduction."""
