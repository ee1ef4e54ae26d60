"""Build the dataset + cloned-policy artifacts for acceptance tests.

Stage one of the heavy builds: SAC data collection at nominal dynamics
on both acceptance environments, then behavior cloning on the replay
datasets.  Everything is cached; finished artifacts are skipped.

Run from the repo root:  python3 scripts/build_collection_artifacts.py
"""

import json
import sys
import time

from resac import artifacts
from resac.data import load_dataset, save_dataset
from resac.envs import write_reference_returns
from resac.offline import collect_dataset, save_offline_policy, train_offline

COLLECT = {
    "msd": {"env": "msd", "seed": 0, "total_steps": 80_000},
    # stop shortly after the collector first saturates so the replay keeps
    # its learning-curve character; longer runs drown it in expert data
    "balance": {"env": "balance", "seed": 0, "total_steps": 40_000},
}
BC = {
    "msd": {"env": "msd", "seed": 0, "epochs": 120},
    "balance": {"env": "balance", "seed": 0, "epochs": 120},
}


def log(msg):
    print(f"[{time.strftime('%H:%M:%S')}] {msg}", flush=True)


def build_collection(name):
    params = COLLECT[name]
    if artifacts.have("collect", params):
        log(f"collect/{name}: cached")
        return
    d = artifacts.artifact_path("collect", params)
    log(f"collect/{name}: training collector for {params['total_steps']} steps")
    t0 = time.time()
    res = collect_dataset(params["env"], params["seed"], params["total_steps"],
                          on_progress=lambda s, r: log(f"  {name} step {s}: eval return {r:.2f}"))
    save_dataset(res.dataset, d / "replay.rlcd")
    save_dataset(res.medium_dataset, d / "medium.rlcd")
    write_reference_returns(d / "refs.txt", {params["env"]: res.reference_returns()})
    (d / "eval_log.json").write_text(json.dumps(res.eval_log))
    artifacts.mark_done("collect", params, {
        "random_return": res.random_return,
        "expert_return": res.expert_return,
        "final_eval_return": res.final_eval_return,
        "minutes": round((time.time() - t0) / 60, 1),
    })
    log(f"collect/{name}: done in {(time.time()-t0)/60:.1f} min "
        f"(random {res.random_return:.1f}, expert {res.expert_return:.1f})")


def build_bc(name):
    params = BC[name]
    if artifacts.have("bc", params):
        log(f"bc/{name}: cached")
        return
    src = artifacts.artifact_path("collect", COLLECT[name])
    dataset = load_dataset(src / "replay.rlcd")
    d = artifacts.artifact_path("bc", params)
    log(f"bc/{name}: cloning {len(dataset)} transitions for {params['epochs']} epochs")
    t0 = time.time()
    res = train_offline(dataset, epochs=params["epochs"], seed=params["seed"])
    save_offline_policy(d / "offline.ckpt", res.policy)
    artifacts.mark_done("bc", params, {
        "final_train_loss": res.final_train_loss,
        "holdout_loss": res.holdout_loss,
        "epoch_losses": res.epoch_losses,
        "param_hash": res.policy.param_hash(),
        "minutes": round((time.time() - t0) / 60, 1),
    })
    log(f"bc/{name}: done in {(time.time()-t0)/60:.1f} min "
        f"(train {res.final_train_loss:.4f}, holdout {res.holdout_loss:.4f})")


def main():
    only = sys.argv[1] if len(sys.argv) > 1 else None
    for name in ("msd", "balance"):
        if only and name != only:
            continue
        build_collection(name)
        build_bc(name)
    log("stage complete")


if __name__ == "__main__":
    main()
