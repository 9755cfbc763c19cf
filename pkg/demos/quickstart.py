"""Generate a clean desk-scale dataset, train the full model, evaluate both modes.

    python3 demos/quickstart.py [workdir]

Takes roughly a minute on one CPU core.
"""

import sys
import tempfile
from pathlib import Path

from infogeo.config import TrainConfig
from infogeo.evaluation import evaluate
from infogeo.synthgen import SceneSpec, generate_dataset, load_dataset, manifest_checksum
from infogeo.trainer import train


def main(workdir: Path) -> None:
    data = workdir / "data"
    generate_dataset(SceneSpec.clean(), 64, 7, data)
    print(f"dataset {data} checksum {manifest_checksum(data)}")
    ds = load_dataset(data)

    def progress(epoch, row):
        print(f"epoch {epoch:3d}  total {row.total:.4f}  align {row.align:.4f}")

    result = train(ds, TrainConfig.desk(seed=7), workdir / "run", progress=progress)
    print(f"trained in {result.seconds:.1f}s, checkpoint {result.checkpoint}")
    for mode in ("vanilla", "augmented"):
        rep = evaluate(result.model, ds, mode)
        print(f"{mode:9s}  R@1 {rep.r_at_1:.3f}  R@5 {rep.r_at_5:.3f}  AP {rep.ap:.3f}")


if __name__ == "__main__":
    if len(sys.argv) > 1:
        main(Path(sys.argv[1]))
    else:
        with tempfile.TemporaryDirectory() as tmp:
            main(Path(tmp))
