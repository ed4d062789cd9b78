"""Generate data for a preset, train it and evaluate it through the CLI.

    python3 scripts/run_preset.py pendulum_desk runs/pendulum_desk
    python3 scripts/run_preset.py pendulum runs/pendulum --seed 3

Every step writes a manifest, so any stage can be replayed on its own.
"""

import argparse
from pathlib import Path

from koopnet import cli
from koopnet.experiment import load_config


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("preset", help="preset name or config path")
    p.add_argument("out")
    p.add_argument("--seed", type=int, help="training seed (default: the preset's)")
    p.add_argument("--data-seed", type=int, default=0)
    args = p.parse_args()

    cfg = load_config(args.preset)
    out = Path(args.out)
    data = out / "data"
    for split, n in (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)):
        cli.main(["generate", "--system", cfg.system, "--split", split, "--n", str(n),
                  "--seed", str(args.data_seed), "--out", str(data)])
    train = ["-v", "train", "--data", str(data), "--config", args.preset, "--out", str(out / "run")]
    if args.seed is not None:
        train += ["--seed", str(args.seed)]
    if cli.main(train) != 0:
        raise SystemExit(1)
    model = str(out / "run" / "model.json")
    cli.main(["eval", "--model", model, "--data", str(data), "--report", str(out / "eval" / "report.json")])
    for kind in ("eigenfunctions", "eigenvalues"):
        cli.main(["export", "--model", model, "--kind", kind, "--out", str(out / "export")])
    cli.main(["export", "--model", model, "--kind", "prediction", "--data", str(data), "--out", str(out / "export")])


if __name__ == "__main__":
    main()
