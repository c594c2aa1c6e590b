"""moesim command-line scripts."""
