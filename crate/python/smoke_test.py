"""Smoke test for the discwsod Python bindings.

Build and install the extension first:

    pip install --no-build-isolation ./crates/python

then run ``python python/smoke_test.py``. Exits non-zero on failure.
"""

import json
import math
import sys
import tempfile
from pathlib import Path

import discwsod

ROOT = Path(__file__).resolve().parent.parent


def check(cond, what):
    if not cond:
        print(f"FAIL {what}")
        sys.exit(1)
    print(f"ok   {what}")


def main():
    cfg = discwsod.Config.from_toml(
        "[data]\ntrain_images = 40\neval_images = 20\n[train]\nouter_rounds = 2\n"
    )
    check(len(cfg.hash()) == 12, "config hash")
    try:
        discwsod.Config.from_toml("[train]\nbogus = 1\n")
        check(False, "unknown key rejected")
    except ValueError as e:
        check("train.bogus" in str(e), "unknown key names its field")

    data = discwsod.Dataset.generate(cfg, 60)
    check(len(data) == 60, "dataset length")
    img = data.image(0)
    check(len(img["boxes"]) == 20 and len(img["features"][0]) == 16, "image shape")
    check(img["ground_truth"] is not None, "ground truth present")
    check(data.to_weak().image(0)["ground_truth"] is None, "weak copy drops ground truth")
    check(data.recall() > 0.9, "proposal recall")

    y = discwsod.constrained_argmax([[1.0, 0.0, -1.0], [2.0, 0.5, 0.0]], [True, True])
    check(sorted(y) == [1, 2], "constrained argmax labels both classes")
    check(
        y == discwsod.brute_force_argmax([[1.0, 0.0, -1.0], [2.0, 0.5, 0.0]], [True, True]),
        "sampler matches brute force",
    )

    g1, g2 = [0, 0, 10, 10], [20, 20, 30, 30]
    ap = discwsod.average_precision(
        [(0, g1, 0.9), (0, [50, 50, 60, 60], 0.8), (0, g2, 0.7)], [(0, g1), (0, g2)]
    )
    check(abs(ap - 5 / 6) < 1e-12, "hand example AP is 5/6")
    check(discwsod.iou(g1, g1) == 1.0, "iou of a box with itself")

    train = discwsod.Dataset.generate(cfg, 40)
    trainer = discwsod.Trainer(train, cfg)
    rounds = trainer.run()
    check(len(rounds) == 2 and trainer.is_finished(), "two training rounds")
    check(all(math.isfinite(r["disc"]) for r in rounds), "finite objective")
    report = trainer.evaluate(data)
    check(0.0 <= report["map"] <= 1.0 and len(report["ap"]) == 3, "evaluation report")

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        discwsod.cmd_gen_data(cfg, tmp / "data")
        discwsod.cmd_train(cfg, tmp / "data" / "train.jsonl", tmp / "a")
        discwsod.cmd_train(cfg, tmp / "data" / "train.jsonl", tmp / "b")
        same = all(
            (tmp / "a" / f).read_bytes() == (tmp / "b" / f).read_bytes()
            for f in ["metrics.csv", "model.ckpt"]
        )
        check(same, "repeated training is byte-identical")
        r = discwsod.cmd_eval(cfg, tmp / "a" / "model.ckpt", tmp / "data" / "eval.jsonl", tmp / "e")
        check((tmp / "e" / "report.csv").exists() and r["mean_corloc"] is not None, "eval command")

    try:
        import jsonschema
    except ImportError:
        print("skip schema validation (jsonschema not installed)")
    else:
        schema = json.loads((ROOT / "docs" / "dataset.schema.json").read_text())
        validator = jsonschema.Draft202012Validator(schema)
        for name in ["default_scene.jsonl", "small_weak.jsonl"]:
            for line in (ROOT / "fixtures" / name).read_text().splitlines():
                validator.validate(json.loads(line))
            check(len(discwsod.Dataset.load(ROOT / "fixtures" / name)) > 0, f"fixture {name} matches the schema and loads")

    checks = discwsod.run_checks(seed=0)
    check(all(c["passed"] for c in checks), f"{len(checks)} oracle checks pass")
    print("smoke test passed")


if __name__ == "__main__":
    main()
