"""How per-round noise is calibrated to a privacy budget, and what happens
when the round horizon changes mid-training.

Run:  python3 demos/01_noise_calibration.py
"""

import math

from udpfl.accountant import (
    BudgetExhausted,
    PrivacyBudget,
    calibrate_sigma,
    inverse_variance_budget,
    recalibrate_sigma,
    sensitivity,
)

# One client: 800 local samples, step size 0.05, clip norm 1.0.
# A one-sample change moves its full-batch clipped step by at most 2*eta*C/n.
dl = sensitivity(eta=0.05, clip=1.0, n_samples=800)
print(f"per-step sensitivity           {dl:.3e}")

budget = PrivacyBudget(epsilon=8.0, delta=1e-3)
q = 0.6  # 30 of 50 clients selected per round

print("\nnoise std needed for (eps=8, delta=1e-3) over a fixed horizon:")
for T in (50, 100, 200, 400):
    sigma = calibrate_sigma(budget, q, T, dl)
    print(f"  T={T:<4d}  sigma = {sigma:.6e}")
print("sigma grows like sqrt(T): more rounds -> more noise per round.")

# The same budget, phrased as spendable inverse noise variance: each round
# with noise sigma consumes 1/sigma^2 of it, regardless of when it happens.
B = inverse_variance_budget(budget, q, dl)
T = 200
sigma = calibrate_sigma(budget, q, T, dl)
print(f"\ninverse-variance budget B      {B:.6e}")
print(f"T x 1/sigma^2 at T=200         {T / sigma**2:.6e}   (saturates B exactly)")

# Mid-training the scheduler shrinks the horizon; the remaining budget is
# re-spread over fewer rounds, so the per-round noise DROPS.
t = 80
hist = [sigma] * t
for T_new in (200, 150, 120, 100):
    s = recalibrate_sigma(budget, q, T_new, t, hist, dl)
    print(f"after {t} rounds, horizon {T_new:>3d}: remaining-round sigma = {s:.6e}")

# Overdraw protection: a history that already spent everything raises.
try:
    recalibrate_sigma(budget, q, 210, 200, [sigma * 0.5] * 200, dl)
except BudgetExhausted as e:
    print(f"\noverdrawn history -> BudgetExhausted: {e}")

# epsilon = inf is the noiseless sentinel: zero noise, nothing charged.
print(f"\nnoiseless sentinel sigma       {calibrate_sigma(PrivacyBudget(math.inf, 1e-3), q, T, dl)}")
