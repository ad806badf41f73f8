#!/usr/bin/env python3
"""Smoke test of the bctrl_py extension module.

Builds nothing itself: run `cargo build -p bctrl-py` first, then
`python3 python/smoke_test.py`. The script locates the compiled cdylib under
target/, stages it as an importable module, and walks the API end to end on
desk-sized problems (a few seconds total).
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def stage_module() -> None:
    candidates = [
        REPO / "target" / profile / "libbctrl_py.so"
        for profile in ("debug", "release")
    ]
    built = [p for p in candidates if p.exists()]
    if not built:
        sys.exit(
            "libbctrl_py.so not found under target/; build it first with\n"
            "    cargo build -p bctrl-py"
        )
    newest = max(built, key=lambda p: p.stat().st_mtime)
    stage = Path(tempfile.mkdtemp(prefix="bctrl_py."))
    shutil.copy2(newest, stage / "bctrl_py.so")
    sys.path.insert(0, str(stage))


stage_module()
import bctrl_py  # noqa: E402


def ok(label: str) -> None:
    print(f"ok - {label}")


def approx(a: float, b: float, tol: float = 1e-9) -> bool:
    return abs(a - b) <= tol


# --- Poisson solver -------------------------------------------------------
n = 5
flat = [5.0] * n
y = bctrl_py.solve_poisson(n, flat, flat, flat, flat, c=0.0)
assert len(y) == n and all(len(row) == n for row in y)
assert all(approx(v, 5.0) for row in y for v in row), "constant data, constant solution"
ok("solve_poisson reproduces the constant solution")

top = [math.sin(math.pi * (j + 1) / (n + 1)) for j in range(n)]
zeros = [0.0] * n
y1 = bctrl_py.solve_poisson(n, top, zeros, zeros, zeros, c=0.0)
y2 = bctrl_py.solve_poisson(n, [2 * t for t in top], zeros, zeros, zeros, c=0.0)
assert all(
    approx(y2[i][j], 2 * y1[i][j]) for i in range(n) for j in range(n)
), "the zero-source problem is linear in the boundary data"
ok("solve_poisson is linear in the boundary data")

try:
    bctrl_py.solve_poisson(n, flat[:-1], flat, flat, flat, c=0.0)
except ValueError:
    ok("solve_poisson rejects a short edge with ValueError")
else:
    sys.exit("short edge accepted")

# --- problems and guesses -------------------------------------------------
problem = bctrl_py.Problem(
    n=6, c=-20.0, y_max=1.5, u_min=-1.0, u_max=2.0, quad1=(2, -1), quad2=(0, 1)
)
profile = problem.desired_profile()
assert len(profile) == 6 and len(profile[0]) == 6
assert problem.n == 6 and problem.c == -20.0 and problem.alpha == bctrl_py.ALPHA
assert "Problem(id=0, n=6" in repr(problem)
ok("Problem exposes its description and profile")

u0 = bctrl_py.initial_guess(problem, strategy="mean")
assert len(u0) == 4 * 6
assert max(u0) == min(u0), "the mean guess is a constant control"
ok("initial_guess returns a constant 4n ring for the mean strategy")

try:
    bctrl_py.initial_guess(problem, strategy="informed")
except ValueError as e:
    assert "needs weights" in str(e)
    ok("informed guess without weights raises ValueError")
else:
    sys.exit("informed guess accepted without weights")

# --- cost and gradient ----------------------------------------------------
breakdown = bctrl_py.evaluate_cost(problem, u0)
assert breakdown["f"] >= 0.0 and approx(
    breakdown["f"], breakdown["f_o"] + 1e4 * breakdown["f_v"], tol=1e-9 * (1 + breakdown["f"])
)
ok("evaluate_cost decomposes into f_o + beta * f_v")

bd2, grad = bctrl_py.cost_gradient(problem, u0)
assert approx(bd2["f"], breakdown["f"], tol=1e-12)
assert len(grad) == len(u0)
step = 1e-6
k = 3
up = list(u0)
um = list(u0)
up[k] += step
um[k] -= step
fd = (bctrl_py.evaluate_cost(problem, up)["f"] - bctrl_py.evaluate_cost(problem, um)["f"]) / (
    2 * step
)
assert abs(grad[k] - fd) <= 1e-4 * max(1.0, abs(fd)), f"gradient {grad[k]} vs fd {fd}"
ok("cost_gradient matches a finite difference")

# --- hybrid runs ----------------------------------------------------------
params = bctrl_py.HybridParams.learned_default()
assert params.param_count() == len(params.flatten())
run = bctrl_py.run_hybrid(problem, params, iters=8)
assert len(run["trace"]) == 9 and len(run["contributions"]) == 8
assert run["aborted"] is None
assert approx(run["best_cost"], min(run["trace"]), tol=0.0)
assert run["best_cost"] < run["trace"][0], "eight updates should improve the mean guess"
assert all(net == 0.0 for _, _, net in run["contributions"]), "zero network contributes nothing"
ok("run_hybrid descends and reports a consistent trace")

# --- checkpoints ----------------------------------------------------------
with tempfile.TemporaryDirectory() as tmp:
    ckpt = Path(tmp) / "params.json"
    seeded = bctrl_py.HybridParams.seeded(3)
    seeded.save(ckpt)
    again = bctrl_py.HybridParams.load(ckpt)
    assert seeded.flatten() == again.flatten(), "checkpoints round-trip exactly"

    wpath = Path(tmp) / "guess.json"
    weights = bctrl_py.GuessWeights.near_identity(seed=1, noise=0.05)
    weights.save(wpath)
    assert bctrl_py.GuessWeights.load(wpath).param_count() == weights.param_count()
ok("checkpoints round-trip bit-exactly")

# --- datasets, evaluation and training ------------------------------------
problems = [
    bctrl_py.Problem(n=6, c=-10.0, y_max=1.0, u_min=-0.5, u_max=1.5, quad1=(2, -1), id=0),
    bctrl_py.Problem(n=7, c=0.0, y_max=1.2, u_min=-0.8, u_max=1.2, quad2=(1, 0), id=1),
    bctrl_py.Problem(n=6, c=-30.0, y_max=1.5, u_min=-1.0, u_max=2.0, sin1=(2, 3), id=2),
    bctrl_py.Problem(n=8, c=-20.0, y_max=2.0, u_min=-1.0, u_max=2.5, quad1=(1, 1), id=3),
]
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "data.csv"
    bctrl_py.save_problems(problems, path)
    loaded = bctrl_py.load_problems(path)
    assert [p.id for p in loaded] == [0, 1, 2, 3]
    assert loaded[2].desired_profile() == problems[2].desired_profile()
ok("datasets round-trip through CSV")

eval_out = bctrl_py.eval_guesses(problems)
assert eval_out["strategies"] == ["mean", "median", "edge"]
assert len(eval_out["costs"]) == 4 and len(eval_out["costs"][0]) == 3
ok("eval_guesses covers the constant baselines")

weights, val_costs = bctrl_py.train_informed_guess(problems, epochs=3, lr=0.05)
assert len(val_costs) >= 2 and min(val_costs) <= val_costs[0]
eval_inf = bctrl_py.eval_guesses(problems, weights=weights)
assert eval_inf["strategies"] == ["mean", "median", "edge", "informed", "hybrid"]
ok("train_informed_guess returns usable weights")

trained, opt_val = bctrl_py.train_optimizer(problems, episodes=4, seed=0)
assert len(opt_val) >= 1 and trained.param_count() == params.param_count()
run2 = bctrl_py.run_hybrid(problems[0], trained, iters=4)
assert math.isfinite(run2["best_cost"])
ok("train_optimizer returns runnable parameters")

print("smoke test passed")
