# Solver stage modules
