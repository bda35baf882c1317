"""Solve the kinetic equation twice: once spatially homogeneous, where the
density obeys rho' = -2 rho^2, and once with the sink switched off, where the
answer is the free hypoelliptic evolution of the uniform ball."""

import numpy as np

from kinetic_annihilation import DensityField, PhaseGrid, UniformBall, free_density, solve

grid = PhaseGrid(1, 1.0, 8, 8.0, 256)
f0 = DensityField.homogeneous(grid, 1.0, lambda v: np.exp(-v[..., 0] ** 2 / 0.5))
traj = solve(f0, 2.0, 0.05)
print("t      rho(t)     1/(1+2t)")
for t, f in list(zip(traj.times, traj.fields))[::8]:
    print(f"{t:4.2f}  {f.rho().mean():.6f}  {1 / (1 + 2 * t):.6f}")

ball = UniformBall(1)
grid = PhaseGrid.for_problem(ball.radius, 1.0, 256, 256)
free = solve(DensityField.from_density(ball, grid), 1.0, 0.1, sink=False).final
x, v = grid.mesh()
exact = free_density(1.0, x[..., 0], v[..., 0], ball)
print("relative L1 gap to the free density at t = 1:",
      np.abs(free.values - exact).sum() / exact.sum())
