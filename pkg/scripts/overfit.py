"""Overfit the ``test`` preset on one synthetic 64x64 scene and report per-step metrics."""

import argparse

from dar.experiments import overfit


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=42, help="scene seed")
    args = ap.parse_args(argv)

    def log(it, loss, lr):
        if it % 25 == 0:
            print(f"it {it} loss {loss:.4f} lr {lr:.2e}", flush=True)

    res = overfit(args.seed, log=log)
    for k, r in enumerate(res.per_step, start=1):
        print(f"step {k}: rmse {r.rmse:.4f} delta1 {r.delta1:.4f}")
    print(f"{res.seconds:.0f}s")


if __name__ == "__main__":
    main()
