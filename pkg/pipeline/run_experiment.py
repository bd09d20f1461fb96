"""
Run the whole experiment once: generate, train the predictor and both
baselines, evaluate each on the test split and plot the curves.

Environment:
    FORCESIM_OUT_DIR     output directory (default runs/default)
    FORCESIM_SCENES      scenes to generate (default 200)
    FORCESIM_SEED        seed for generation and training (default 0)
    FORCESIM_ARCH        tiny or small (default small)
    FORCESIM_ITERS       training iterations (default 2000)

Usage:
    python pipeline/run_experiment.py
"""

import os
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from pipeline import cli  # noqa: E402
from simulation.settings import env_int  # noqa: E402

KINDS = ("predictor", "regression", "nn")


def experiment_steps(out_dir: Path, scenes: int, seed: int, arch: str, iters: int) -> list[tuple[str, list[str]]]:
    data = out_dir / "data.fsd"
    steps = [
        ("generate", ["gen", "--scenes", str(scenes), "--seed", str(seed), "--out", str(data)]),
    ]
    for kind in KINDS:
        model = out_dir / f"{kind}.fsm"
        report = out_dir / f"{kind}_report.json"
        train = ["train", "--data", str(data), "--arch", arch, "--iters", str(iters), "--seed", str(seed)]
        if kind != "predictor":
            train += ["--baseline", kind]
        steps.append((f"train {kind}", train + ["--out", str(model)]))
        steps.append((f"eval {kind}", ["eval", "--model", str(model), "--data", str(data), "--out", str(report)]))
        steps.append((f"plot {kind}", ["plot", "--report", str(report), "--out", str(out_dir / kind)]))
    return steps


def run(out_dir: Path, scenes: int, seed: int, arch: str, iters: int) -> int:
    """Run every step in order; stop at the first non-zero exit code and return it."""
    for name, argv in experiment_steps(out_dir, scenes, seed, arch, iters):
        print(f"[{name}] forcesim {' '.join(argv)}")
        code = cli.main(argv)
        if code != cli.EXIT_OK:
            print(f"[{name}] ✗ Failed with exit code {code}")
            return code
        print(f"[{name}] ✓ Done")
    return cli.EXIT_OK


if __name__ == "__main__":
    out_dir = Path(os.getenv("FORCESIM_OUT_DIR", "runs/default"))
    scenes = env_int("SCENES", 200)
    seed = env_int("SEED", 0)
    arch = os.getenv("FORCESIM_ARCH", "small")
    iters = env_int("ITERS", 2000)

    print("=" * 60)
    print(f"Experiment: {scenes} scenes, seed {seed}, {arch} towers, {iters} iterations -> {out_dir}")
    print("=" * 60)
    code = run(out_dir, scenes, seed, arch, iters)
    print("=" * 60)
    sys.exit(code)
