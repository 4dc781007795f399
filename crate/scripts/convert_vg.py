#!/usr/bin/env python3
"""Convert the Visual Genome scene-graph HDF5 distribution to annotation JSON.

Takes the widely used preprocessed bundle (VG-SGG.h5, VG-SGG-dicts.json,
image_data.json) and writes the JSON array consumed by the `vg` dataset
source:

    [{"image_id": "498334", "width": 800, "height": 600,
      "objects": [{"label": "man", "x": 10, "y": 20, "w": 50, "h": 120}],
      "relationships": [{"subject_index": 0, "object_index": 1,
                         "predicate": "on"}]}]

Boxes in the HDF5 file are (cx, cy, w, h) in a frame whose longer side is
scaled to 1024; they are mapped back to pixel corner coordinates using each
image's true extent. The bundle's split column (0 train, 2 test) can filter
the output; the pipeline applies its own seeded train/val/test partition to
whatever this script emits.
"""

import argparse
import json
import sys

import h5py
import numpy as np

BOX_FRAME = 1024.0


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sgg-h5", required=True, help="VG-SGG.h5")
    p.add_argument("--dicts", required=True, help="VG-SGG-dicts.json")
    p.add_argument("--image-data", required=True, help="image_data.json")
    p.add_argument("--out", required=True, help="output annotation JSON")
    p.add_argument(
        "--split",
        choices=["train", "test", "all"],
        default="all",
        help="keep only images with this split flag (default: all)",
    )
    p.add_argument(
        "--max-images",
        type=int,
        default=0,
        help="stop after this many kept images (0 = no limit)",
    )
    return p.parse_args()


def load_dicts(path):
    with open(path) as f:
        d = json.load(f)
    labels = {int(k): v for k, v in d["idx_to_label"].items()}
    predicates = {int(k): v for k, v in d["idx_to_predicate"].items()}
    return labels, predicates


def convert(args):
    labels, predicates = load_dicts(args.dicts)
    with open(args.image_data) as f:
        image_data = json.load(f)

    keep_flags = {"train": (0,), "test": (2,), "all": (0, 1, 2)}[args.split]

    records = []
    dropped_rels = 0
    with h5py.File(args.sgg_h5, "r") as h5:
        split = h5["split"][:]
        first_box = h5["img_to_first_box"][:]
        last_box = h5["img_to_last_box"][:]
        first_rel = h5["img_to_first_rel"][:]
        last_rel = h5["img_to_last_rel"][:]
        box_key = "boxes_1024" if "boxes_1024" in h5 else "boxes_512"
        frame = BOX_FRAME if box_key == "boxes_1024" else 512.0
        boxes = h5[box_key][:].astype(np.float64)
        box_labels = h5["labels"][:, 0]
        rels = h5["relationships"][:]
        rel_predicates = h5["predicates"][:, 0]

        if len(image_data) != len(split):
            sys.exit(
                f"image_data.json has {len(image_data)} entries, "
                f"{args.sgg_h5} indexes {len(split)} images"
            )

        for i, meta in enumerate(image_data):
            if split[i] not in keep_flags or first_box[i] < 0:
                continue
            width = float(meta["width"])
            height = float(meta["height"])
            scale = frame / max(width, height)

            b0, b1 = int(first_box[i]), int(last_box[i])
            objects = []
            for cx, cy, w, h in boxes[b0 : b1 + 1]:
                objects.append(
                    {
                        "label": labels[int(box_labels[len(objects) + b0])],
                        "x": (cx - w / 2.0) / scale,
                        "y": (cy - h / 2.0) / scale,
                        "w": w / scale,
                        "h": h / scale,
                    }
                )

            relationships = []
            if first_rel[i] >= 0:
                r0, r1 = int(first_rel[i]), int(last_rel[i])
                for (s_global, o_global), pred in zip(
                    rels[r0 : r1 + 1], rel_predicates[r0 : r1 + 1]
                ):
                    s_local, o_local = int(s_global) - b0, int(o_global) - b0
                    if not (0 <= s_local < len(objects) and 0 <= o_local < len(objects)):
                        dropped_rels += 1
                        continue
                    relationships.append(
                        {
                            "subject_index": s_local,
                            "object_index": o_local,
                            "predicate": predicates[int(pred)],
                        }
                    )

            records.append(
                {
                    "image_id": str(meta["image_id"]),
                    "width": width,
                    "height": height,
                    "objects": objects,
                    "relationships": relationships,
                }
            )
            if args.max_images and len(records) >= args.max_images:
                break

    with open(args.out, "w") as f:
        json.dump(records, f)
    n_rels = sum(len(r["relationships"]) for r in records)
    print(
        f"wrote {len(records)} scenes, {n_rels} relationships to {args.out}"
        + (f" ({dropped_rels} cross-image relationships dropped)" if dropped_rels else "")
    )


if __name__ == "__main__":
    convert(parse_args())
