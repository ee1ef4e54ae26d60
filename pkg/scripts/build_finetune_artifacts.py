"""Build the fine-tuning run artifacts for acceptance tests.

Stage two of the heavy builds: the msd probe run for the context checks,
five balance seeds for the adaptation-gain comparison, the reproducibility
pair, the frozen-offline evaluation, and the dynamics sweeps.  Everything
is cached; finished artifacts are skipped.

Run from the repo root:  python3 scripts/build_finetune_artifacts.py
"""

import json
import sys
import time

from resac import artifacts
from resac.config import make_config
from resac.envs import read_reference_returns
from resac.offline import load_offline_policy
from resac.runner import (default_grid, evaluate, finetune, latest_checkpoint,
                          load_bundle, sweep, write_sweep_csv)

COLLECT = {
    "msd": {"env": "msd", "seed": 0, "total_steps": 80_000},
    "balance": {"env": "balance", "seed": 0, "total_steps": 40_000},
}
BC = {
    "msd": {"env": "msd", "seed": 0, "epochs": 120},
    "balance": {"env": "balance", "seed": 0, "epochs": 120},
}

FINETUNE = [
    {"env": "msd", "seed": 0, "total_steps": 50_000, "offline_weight": 0.75},
] + [
    {"env": "balance", "seed": s, "total_steps": 100_000, "offline_weight": 0.75}
    for s in range(5)
]
REPRO = {"env": "balance", "seed": 3, "total_steps": 5_000}

# one shared evaluation seed = identical per-episode dynamics draws for the
# method and the frozen baseline, so their score gap is a paired comparison
EVAL_SEED = 777
SWEEP_SEED = 555
EVAL_EPISODES = 100
SWEEP_EPISODES = 100
SWEEP_PARAMS = ("mass", "damping", "friction", "length")


def log(msg):
    print(f"[{time.strftime('%H:%M:%S')}] {msg}", flush=True)


def refs_path(env):
    return artifacts.artifact_path("collect", COLLECT[env]) / "refs.txt"


def offline_path(env):
    return artifacts.artifact_path("bc", BC[env]) / "offline.ckpt"


def run_config(params):
    return make_config(overrides={
        "env.name": params["env"],
        "run.seed": params["seed"],
        "run.total_steps": params["total_steps"],
        "run.offline_weight": params["offline_weight"],
        "run.offline_policy": str(offline_path(params["env"])),
        "run.references": str(refs_path(params["env"])),
    })


def build_finetune(params):
    tag = f"{params['env']}/seed{params['seed']}"
    if artifacts.have("finetune", params):
        log(f"finetune/{tag}: cached")
        return
    d = artifacts.artifact_path("finetune", params)
    cfg = run_config(params)
    log(f"finetune/{tag}: {params['total_steps']} steps")
    t0 = time.time()
    summary = finetune(cfg, d, progress=lambda s, _: log(f"  {tag} step {s}"))

    ckpt = latest_checkpoint(d / "checkpoints")
    bundle = load_bundle(ckpt[1], cfg)
    refs = read_reference_returns(refs_path(params["env"]))
    stats = evaluate(bundle, EVAL_EPISODES, EVAL_SEED, refs=refs)
    (d / "eval100.json").write_text(json.dumps(stats, sort_keys=True))

    artifacts.mark_done("finetune", params, {
        "summary": summary,
        "eval_mean": stats["mean"],
        "eval_norm_mean": stats.get("norm_mean"),
        "minutes": round((time.time() - t0) / 60, 1),
    })
    log(f"finetune/{tag}: done in {(time.time()-t0)/60:.1f} min "
        f"(eval mean {stats['mean']:.2f}, norm {stats.get('norm_mean', float('nan')):.1f})")


def build_baseline_eval():
    params = {"env": "balance", "kind": "frozen-offline", "episodes": EVAL_EPISODES}
    if artifacts.have("baseline-eval", params):
        log("baseline-eval/balance: cached")
        return
    d = artifacts.artifact_path("baseline-eval", params)
    offline = load_offline_policy(offline_path("balance"))
    refs = read_reference_returns(refs_path("balance"))
    from resac.runner import evaluate_policy
    stats = evaluate_policy("balance", lambda o: offline.act(o),
                            EVAL_EPISODES, EVAL_SEED, refs=refs)
    (d / "eval100.json").write_text(json.dumps(stats, sort_keys=True))
    artifacts.mark_done("baseline-eval", params, {
        "eval_mean": stats["mean"], "eval_norm_mean": stats.get("norm_mean")})
    log(f"baseline-eval/balance: mean {stats['mean']:.2f}, "
        f"norm {stats.get('norm_mean', float('nan')):.1f}")


def build_repro():
    if artifacts.have("repro", REPRO):
        log("repro: cached")
        return
    d = artifacts.artifact_path("repro", REPRO)
    cfg = run_config({**REPRO, "offline_weight": 0.75})
    t0 = time.time()
    for side in ("run_a", "run_b"):
        log(f"repro/{side}: {REPRO['total_steps']} steps")
        finetune(cfg, d / side)
    same = (d / "run_a/metrics.jsonl").read_bytes() == (d / "run_b/metrics.jsonl").read_bytes()
    artifacts.mark_done("repro", REPRO, {
        "bitwise_identical": bool(same),
        "minutes": round((time.time() - t0) / 60, 1),
    })
    log(f"repro: done, bitwise identical = {same}")


def pick_median_seed():
    """Balance seed whose 100-episode normalized mean is the median of the five."""
    scored = []
    for params in FINETUNE:
        if params["env"] != "balance":
            continue
        d = artifacts.artifact_path("finetune", params)
        stats = json.loads((d / "eval100.json").read_text())
        scored.append((stats.get("norm_mean", stats["mean"]), params))
    scored.sort(key=lambda t: t[0])
    return scored[len(scored) // 2][1]


def build_sweeps():
    params = {"env": "balance", "episodes": SWEEP_EPISODES}
    if artifacts.have("sweeps", params):
        log("sweeps/balance: cached")
        return
    d = artifacts.artifact_path("sweeps", params)
    chosen = pick_median_seed()
    cfg = run_config(chosen)
    ckpt = latest_checkpoint(
        artifacts.artifact_path("finetune", chosen) / "checkpoints")
    bundle = load_bundle(ckpt[1], cfg)
    offline = load_offline_policy(offline_path("balance"))
    refs = read_reference_returns(refs_path("balance"))

    rows = {"method": {}, "frozen": {}}
    t0 = time.time()
    for param in SWEEP_PARAMS:
        grid = default_grid(param)
        log(f"sweeps/{param}: method over {len(grid)} values")
        rows["method"][param] = sweep(bundle, param, grid, SWEEP_EPISODES,
                                      SWEEP_SEED, refs=refs)
        write_sweep_csv(rows["method"][param], d / f"method_{param}.csv")
        log(f"sweeps/{param}: frozen baseline")
        rows["frozen"][param] = sweep(None, param, grid, SWEEP_EPISODES,
                                      SWEEP_SEED, refs=refs,
                                      act=lambda o: offline.act(o),
                                      env_name="balance")
        write_sweep_csv(rows["frozen"][param], d / f"frozen_{param}.csv")
    (d / "rows.json").write_text(json.dumps(
        {"rows": rows, "checkpoint_seed": chosen["seed"]}, sort_keys=True))
    artifacts.mark_done("sweeps", params, {
        "checkpoint_seed": chosen["seed"],
        "minutes": round((time.time() - t0) / 60, 1),
    })
    log(f"sweeps/balance: done in {(time.time()-t0)/60:.1f} min "
        f"(checkpoint seed {chosen['seed']})")


def main():
    only = sys.argv[1] if len(sys.argv) > 1 else None
    stages = {
        "finetune": lambda: [build_finetune(p) for p in FINETUNE],
        "baseline": build_baseline_eval,
        "repro": build_repro,
        "sweeps": build_sweeps,
    }
    build_baseline_eval()
    if only:
        stages[only]()
    else:
        for p in FINETUNE:
            build_finetune(p)
        build_repro()
        build_sweeps()
    log("stage complete")


if __name__ == "__main__":
    main()