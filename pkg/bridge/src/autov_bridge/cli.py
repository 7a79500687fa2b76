"""Command line front end for the bridge, driving the toy model.

Four subcommands cover the export surface: `export` synthesizes
color-task groups and writes their embeddings, `losses` annotates an
exported dataset with answer losses, `layer` dumps one decoder block in
the engine's interaction layout, and `prompts` renders attention
overlays as PNG files. Flag conventions mirror the engine's CLI: every
flag states its default, --seed controls all randomness, --out names the
output directory.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import export as export_ops
from . import prompts as prompt_ops
from . import toy
from .errors import BridgeError


class UsageError(Exception):
    pass


def _parse_int_list(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as err:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from err
    if not values:
        raise UsageError(f"expected at least one integer in {text!r}")
    return values


def _make_adapter(args) -> toy.ToyLvlm:
    model = toy.ToyLvlm(seed=args.model_seed)
    if args.train_steps > 0:
        loss = toy.fit_color_task(model, steps=args.train_steps, seed=args.model_seed)
        print(f"# trained {args.train_steps} steps, final loss {loss:.4f}")
    return model


def cmd_export(args) -> int:
    adapter = _make_adapter(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    items = toy.make_color_items(args.groups, args.pool, args.seed)
    manifest = export_ops.export_embeddings(adapter, items, out / "dataset.jsonl")
    print(f"# groups: {args.groups - len(manifest.errors)}")
    print(f"# errors: {len(manifest.errors)}")
    print(f"# files: {len(manifest.blobs)}")
    return 0


def cmd_losses(args) -> int:
    adapter = _make_adapter(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = export_ops.compute_combination_losses(
        adapter, args.dataset, out / "scored.jsonl"
    )
    print(f"# errors: {len(manifest.errors)}")
    print(f"# files: {len(manifest.blobs)}")
    return 0


def cmd_layer(args) -> int:
    adapter = _make_adapter(args)
    out = Path(args.out)
    manifest = export_ops.export_interaction_layer(adapter, args.layer, out)
    print(f"# layer: {manifest.layer_index}")
    print(f"# files: {len(manifest.blobs)}")
    return 0


def cmd_prompts(args) -> int:
    adapter = _make_adapter(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    image = toy.make_color_image(args.color, rng)
    layers = _parse_int_list(args.layers)
    overlays = prompt_ops.generate_attention_prompts(adapter, image, toy.QUERY, layers=layers)
    Image.fromarray(image).save(out / "input.png")
    for layer, overlay in overlays.items():
        Image.fromarray(overlay).save(out / f"layer{layer:02d}.png")
    print(f"# layers: {','.join(str(i) for i in sorted(overlays))}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="autov-bridge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="data seed (default: 0)")
    common.add_argument("--model-seed", type=int, default=0,
                        help="toy model init and training seed (default: 0)")
    common.add_argument("--train-steps", type=int, default=0,
                        help="color-task training steps before export, 0 keeps the raw init (default: 0)")
    common.add_argument("--out", default="out", help="output directory (default: out)")

    p = sub.add_parser("export", parents=[common], help="synthesize groups and export embeddings")
    p.add_argument("--groups", type=int, default=20, help="number of groups (default: 20)")
    p.add_argument("--pool", type=int, default=4, help="candidates per group (default: 4)")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("losses", parents=[common], help="annotate a dataset with answer losses")
    p.add_argument("--dataset", required=True, help="dataset file from the export step")
    p.set_defaults(func=cmd_losses)

    p = sub.add_parser("layer", parents=[common], help="export one decoder block")
    p.add_argument("--layer", type=int, default=12, help="decoder block index (default: 12)")
    p.set_defaults(func=cmd_layer)

    p = sub.add_parser("prompts", parents=[common], help="render attention overlay images")
    p.add_argument("--color", default="red", help="square color for the input image (default: red)")
    p.add_argument("--layers", default=",".join(str(i) for i in prompt_ops.DEFAULT_LAYERS),
                   help="comma-separated layer indices (default: 15,20,22,23)")
    p.set_defaults(func=cmd_prompts)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"path error: {err}", file=sys.stderr)
        return 1
    except BridgeError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
