# Finite-temperature density-functional perturbation theory on a plane-wave model
