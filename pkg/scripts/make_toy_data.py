"""Write synthetic CF-FA and HRF datasets plus a toy run configuration.

    python3 scripts/make_toy_data.py --out toy

produces toy/cffa, toy/hrf and toy/config.json, ready for the CLI.
"""

import argparse
import json
from pathlib import Path

from vesselcyclegan.synthetic import write_toy_cffa, write_toy_hrf

TOY_CONFIG = {
    "data": {"validate_counts": False, "hrf_patch": 64,
             "patches": {"train_patch": 64, "eval_patch": 64, "grid_rows": 2, "grid_cols": 2}},
    "seg_net": {"levels": 2, "base_width": 8},
    "generator": {"levels": 2, "base_width": 8, "vit_blocks": 2, "vit_embed_dim": 32, "vit_heads": 4,
                  "token_grid": 16},
    "discriminator": {"layers": 2, "base_width": 8},
    "seg_train": {"epochs": 30, "lr": 0.01, "lr_decay_start_epoch": None},
    "gan_train": {"epochs": 5, "steps_per_epoch": 20, "lr": 0.001},
    "gan_augment": {"crop_size": 48},
}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="toy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--full-counts", action="store_true",
                   help="write the published split sizes (35/10/14 pairs) at a small image size")
    args = p.parse_args()
    out = Path(args.out)
    splits = {"train": 35, "val": 10, "test": 14} if args.full_counts else {"train": 6, "val": 2, "test": 2}
    write_toy_cffa(out / "cffa", splits, size=(72, 90), seed=args.seed)
    write_toy_hrf(out / "hrf", {"train": 2, "val": 1, "test": 1}, size=800, seed=args.seed)
    (out / "config.json").write_text(json.dumps(TOY_CONFIG, indent=2))
    print(f"wrote {out / 'cffa'}, {out / 'hrf'} and {out / 'config.json'}")


if __name__ == "__main__":
    main()
