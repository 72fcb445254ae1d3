"""Rebuild the golden dataset, checkpoint and report.

Run from the repository root only when a deliberate format or model change
invalidates the stored files:

    python tests/golden/regenerate.py
"""

from pathlib import Path

from bevmem.cli import main

HERE = Path(__file__).parent


def run():
    cfg = str(HERE / "config.ini")
    assert main(["--config", cfg, "gen", "--out", str(HERE / "data")]) == 0
    assert main(["--config", cfg, "train", "--data", str(HERE / "data"), "--out-checkpoint", str(HERE / "model.bvm")]) == 0
    assert main(
        ["--config", cfg, "eval", "--checkpoint", str(HERE / "model.bvm"), "--data", str(HERE / "data"), "--report", str(HERE / "report.json")]
    ) == 0
    (HERE / "train_log.jsonl").unlink()


if __name__ == "__main__":
    run()
