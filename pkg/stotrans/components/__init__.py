# Report rendering and output files
