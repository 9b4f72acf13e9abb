"""Adaptive round discounting on the MNIST MLP task.

Start with a generous round budget T. Whenever a round improves test loss by
less than zeta, discount the remaining budget (T <- floor(beta*(T-t)) + t)
and recalibrate the per-round noise downward for the rounds that remain.
The run stops early with less accumulated noise than the fixed-budget run —
and typically a better final model.

Run:   python3 demos/04_adaptive_discounting.py            (784->32->10, ~2 min)
       python3 demos/04_adaptive_discounting.py --full     (784->256->10, slower)

Needs the MNIST IDX files (fetch them once with `udpfl fetch-mnist`).
"""

import argparse
import sys
import time

import numpy as np

from udpfl.accountant import PrivacyBudget
from udpfl.federation import (
    ClientState,
    FederationConfig,
    ServerState,
    evaluate,
    run_training,
)
from udpfl.harness import (
    ExperimentConfig,
    _TAG_INIT,
    _derived_seed,
    build_model_spec,
    load_experiment_data,
)
from udpfl.models import init_params
from udpfl.scheduler import CrdConfig, CrdScheduler

parser = argparse.ArgumentParser()
parser.add_argument("--full", action="store_true", help="hidden width 256 instead of 32")
parser.add_argument("--epsilon", type=float, default=8.0)
args = parser.parse_args()

HIDDEN = 256 if args.full else 32
U, K, SHARD, T_INIT, SEED = 50, 30, 200, 200, 1
ETA, CLIP = 0.5, 3.8094  # clip = median per-sample gradient norm at init

cfg = ExperimentConfig(
    model_kind="mlp",
    hidden_dim=HIDDEN,
    data_source="mnist",
    shard_size=SHARD,
    U=U,
    K=K,
    T_init=T_INIT,
    epsilon_p=args.epsilon,
    delta_p=1e-3,
    eta=ETA,
    clip_C=CLIP,
).resolved()
try:
    shards, train_eval, test = load_experiment_data(cfg, SEED)
except FileNotFoundError as e:
    sys.exit(f"MNIST not found ({e}); run `udpfl fetch-mnist` first")
spec = build_model_spec(cfg, train_eval)


def run(discounted):
    clients = [ClientState(i, shards[i], PrivacyBudget(args.epsilon, 1e-3)) for i in range(U)]
    fcfg = FederationConfig(spec=spec, K=K, eta=ETA, clip=CLIP, seed=SEED)
    w0 = init_params(spec, np.random.default_rng(_derived_seed(SEED, _TAG_INIT)))
    server = ServerState(global_params=w0, T=T_INIT)
    on_round = None
    if discounted:
        v0, _ = evaluate(spec, w0, test)
        on_round = CrdScheduler(CrdConfig(beta=0.9, zeta=1e-3, T_init=T_INIT), v0)
    t0 = time.time()
    res = run_training(server, clients, fcfg, train_eval, test, on_round=on_round)
    return res, time.time() - t0


print(f"MNIST MLP 784->{HIDDEN}->10, U={U} K={K}, eps={args.epsilon}, T_init={T_INIT}")

res, dt = run(discounted=True)
print(f"\n[discounted] finished after {res.realized_T} rounds ({dt:.0f}s)")
print("budget staircase (trigger round: discounted T):")
stairs = [
    (r.round, res.records[i + 1].T_at_start if i + 1 < len(res.records) else res.realized_T)
    for i, r in enumerate(res.records)
    if r.trigger_fired
]
line = "  " + "  ".join(f"{rd}:{T}" for rd, T in stairs[:12])
print(line + ("  ..." if len(stairs) > 12 else ""))
sig = sorted(res.records[0].sigma_by_client.values())[0]
sig_end = sorted(res.records[-1].sigma_by_client.values())[0]
print(f"per-round sigma: {sig:.4e} at start -> {sig_end:.4e} at the end")
crd_loss, crd_acc = res.records[-1].test_loss, res.records[-1].test_accuracy

res, dt = run(discounted=False)
print(f"\n[fixed T={T_INIT}] ran all {res.realized_T} rounds ({dt:.0f}s)")
print(f"\nfinal test loss / accuracy:")
print(f"  discounted  {crd_loss:.4f} / {crd_acc:.4f}")
print(f"  fixed       {res.records[-1].test_loss:.4f} / {res.records[-1].test_accuracy:.4f}")
