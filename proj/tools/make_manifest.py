"""Builds a path,label,split manifest from a dataset layout.

Folder layout:   <root>/<split>/<label>/**/*.{jpg,jpeg,png,webp,bmp}
Metadata table:  any CSV/TSV/Parquet with path, label and split columns

    python tools/make_manifest.py folders DATA_ROOT -o manifest.csv
    python tools/make_manifest.py table meta.csv --root DATA_ROOT --path-col file \
        --label-col ground_truth --split-col partition --fake-values fake,Fake,1 -o manifest.csv
"""

import argparse
import os
import sys

import pandas as pd

IMAGE_EXT = {".jpg", ".jpeg", ".png", ".webp", ".bmp"}
SPLITS = {"train": "train", "training": "train", "test": "test", "testing": "test", "eval": "test"}


def norm_split(value):
    key = str(value).strip().lower()
    if key not in SPLITS:
        raise ValueError(f"unrecognized split '{value}'")
    return SPLITS[key]


def from_folders(root):
    rows = []
    for split_dir in sorted(os.listdir(root)):
        if not os.path.isdir(os.path.join(root, split_dir)):
            continue
        split = norm_split(split_dir)
        for label in ("real", "fake"):
            base = os.path.join(root, split_dir, label)
            if not os.path.isdir(base):
                continue
            for dirpath, _, files in os.walk(base):
                for f in sorted(files):
                    if os.path.splitext(f)[1].lower() in IMAGE_EXT:
                        rows.append((os.path.abspath(os.path.join(dirpath, f)), label, split))
    return pd.DataFrame(rows, columns=["path", "label", "split"])


def read_table(path):
    if path.endswith(".parquet"):
        return pd.read_parquet(path)
    return pd.read_csv(path, sep=None, engine="python")


def from_table(args):
    df = read_table(args.table)
    fake = {v.strip() for v in args.fake_values.split(",")}
    real = {v.strip() for v in args.real_values.split(",")} if args.real_values else None
    out = pd.DataFrame()
    paths = df[args.path_col].astype(str)
    out["path"] = [p if os.path.isabs(p) else os.path.abspath(os.path.join(args.root, p)) for p in paths]

    def label(v):
        s = str(v).strip()
        if s in fake:
            return "fake"
        if real is None or s in real:
            return "real"
        raise ValueError(f"unrecognized label '{v}'")

    out["label"] = df[args.label_col].map(label)
    out["split"] = df[args.split_col].map(norm_split) if args.split_col else args.split
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="mode", required=True)
    f = sub.add_parser("folders")
    f.add_argument("root")
    t = sub.add_parser("table")
    t.add_argument("table")
    t.add_argument("--root", default=".", help="base for relative paths")
    t.add_argument("--path-col", default="path")
    t.add_argument("--label-col", default="label")
    t.add_argument("--split-col", help="omit to put every row in --split")
    t.add_argument("--split", default="test", choices=("train", "test"))
    t.add_argument("--fake-values", default="fake")
    t.add_argument("--real-values", help="default: everything not fake")
    for p in (f, t):
        p.add_argument("-o", "--out", default="manifest.csv")
        p.add_argument("--check-exists", action="store_true", help="drop rows whose file is missing")
    args = ap.parse_args()

    df = from_folders(args.root) if args.mode == "folders" else from_table(args)
    if args.check_exists:
        keep = df["path"].map(os.path.isfile)
        if (~keep).any():
            print(f"dropping {int((~keep).sum())} rows with missing files", file=sys.stderr)
        df = df[keep]
    if df.empty:
        sys.exit("no images found")
    df[["path", "label", "split"]].to_csv(args.out, index=False)
    counts = df.groupby(["split", "label"]).size()
    print(f"wrote {args.out}: " + ", ".join(f"{s}/{l} {n}" for (s, l), n in counts.items()))


if __name__ == "__main__":
    main()
