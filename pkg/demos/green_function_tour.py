"""Evaluate the Kolmogorov kernel, its Green's function and the volume
function Lambda, and confirm the doubling bound in exact arithmetic."""

from kinetic_annihilation import KernelToolkit
from kinetic_annihilation.harness import max_doubling_ratio
from kinetic_annihilation.kernels import green_shell_sums

tk = KernelToolkit(d=1)
print("P_0.5((0,0) -> (0.1,0.2)) =", tk.kolmogorov(0.5, 0, 0, 0.1, 0.2))
est = tk.green(0, 0, 0.3, 0.4, full_output=True)
print(f"G((0,0),(0.3,0.4)) in [{est.lower:.6f}, {est.upper:.6f}]")
shells, partial = green_shell_sums(0.5, 1.0, n_shells=6, rtol=1e-3)
print("dyadic shell integrals:", shells)
print("worst doubling ratio over 2000 points:", float(max_doubling_ratio(2000)), "<= 16")
