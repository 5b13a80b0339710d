"""Label quality across hyperepochs on the synthetic blob dataset.

Runs the merge strategies with guided-diffusion post-processing, one run
without post-processing, and the reference-free ablation with a predictor that
dilates its own labels, then prints pooled Dice of GT_h against the clean truth.
"""
import argparse
import tempfile
from pathlib import Path

from gadclean.image import labelmap_from_png
from gadclean.labels import ConfusionCounts, confusion, dice
from gadclean.pipeline import HyperepochConfig, run_pipeline
from gadclean.synthetic import ablation_document, dilating_predictor_command, write_change_dataset


def dice_per_hyperepoch(out, root, entries, n):
    scores = []
    for h in range(n):
        counts = ConfusionCounts()
        for e in entries:
            labels = labelmap_from_png(out / f"hyperepoch-{h}" / "merged" / f"{e['id']}.png")
            counts = counts + confusion(labels, labelmap_from_png(root / e["truth"]))
        scores.append(dice(counts))
    return scores


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pairs", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--hyperepochs", type=int, default=4)
    ap.add_argument("--workdir", type=Path)
    args = ap.parse_args()

    work = args.workdir or Path(tempfile.mkdtemp(prefix="gadclean-ablation-"))
    root = work / "data"
    entries = write_change_dataset(root, n_pairs=args.pairs, seed=args.seed)
    runs = {f"{s} + gad": {"strategy": s} for s in ("intersection", "ignore-fn", "ignore-all")}
    runs["intersection, no post-processing"] = {"strategy": "intersection", "post_processor": "none"}
    dilate = {"no_reference_constraint": True,
              "predictor": {"kind": "external", "command": dilating_predictor_command(1)}}
    for n in (20, 50, 100, 300):
        runs[f"no reference, dilating predictor, gad N={n}"] = {**dilate, "gad": {"iterations": n}}

    print(f"workdir: {work}")
    for i, (name, overrides) in enumerate(runs.items()):
        overrides = {"hyperepochs": args.hyperepochs, **overrides}
        if "gad" in overrides:
            overrides["gad"] = {"kappa": 5.0, "lambda": 0.24, **overrides["gad"]}
        out = work / f"run-{i}"
        manifest = run_pipeline(HyperepochConfig.from_dict(ablation_document(root, entries, out, **overrides)))
        scores = dice_per_hyperepoch(out, root, entries, args.hyperepochs)
        print(f"{name:<45} {manifest.status:<6} " + " ".join(f"{s:.4f}" for s in scores))


if __name__ == "__main__":
    main()
