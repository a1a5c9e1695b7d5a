"""Generate the bundled two-class toy benchmark under data/toy/.

Vocabulary: sentiment groups (positive / negative) plus neutral filler groups.
Each word = group centre + a per-word nuisance offset, so embedding neighbours
share a centre and differ mostly in the nuisance dimensions. The words that
appear in the training and evaluation text ("common" words) carry a nuisance
offset that leans along a shared direction per class, so a plain classifier can
pick it up as a shortcut. The remaining group members ("rare" words) never
occur in text and only show up as substitution candidates, with nuisance
offsets pointing anywhere.

Two embedding files share the vocabulary: ``embeddings.txt`` (the model's
frozen features and the generation attack's neighbour source) and
``embeddings_alt.txt`` (independent nuisance draws; used as a held-out
neighbour source).

    python scripts/make_toy_benchmark.py [--out data/toy] [--seed 0]
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

DIM = 16
NUIS_DIMS = slice(8, 16)


def make_vectors(rng, args):
    """Rows for every word plus (polarity, group, is_common) metadata.

    dim 0 is the sentiment axis, dims 1-7 carry group identity, dims 8-15 carry
    per-word nuisance; common sentiment words add a class-signed shortcut
    direction there. ``--filler-groups 0`` gives unstructured random fillers.
    """
    words, vecs, meta = [], [], []
    shortcut_dir = np.zeros(DIM)
    shortcut_dir[NUIS_DIMS] = rng.normal(size=8)
    shortcut_dir /= np.linalg.norm(shortcut_dir)
    for polarity, sign in (("pos", 1.0), ("neg", -1.0)):
        for g in range(args.groups):
            centre = np.zeros(DIM)
            centre[0] = args.strength * sign
            centre[1:8] = rng.normal(scale=args.identity, size=7)
            for k in range(args.common + args.rare):
                common = k < args.common
                off = np.zeros(DIM)
                off[NUIS_DIMS] = rng.normal(scale=args.nuisance, size=8)
                if common:
                    off += args.shortcut * sign * shortcut_dir
                words.append(f"{polarity}{g}{'c' if common else 'r'}{k}")
                vecs.append(centre + off)
                meta.append((polarity, g, common))
    per_group = -(-args.fillers // args.filler_groups) if args.filler_groups else 0
    for i in range(args.fillers):
        if args.filler_groups:
            if i % per_group == 0:
                fcentre = np.zeros(DIM)
                fcentre[1:8] = rng.normal(scale=args.identity, size=7)
            v = fcentre.copy()
            v[NUIS_DIMS] = rng.normal(scale=args.nuisance, size=8)
            v *= args.filler_scale
        else:
            v = rng.normal(scale=args.filler_scale, size=DIM)
            v[0] = 0.0
        words.append(f"w{i}")
        vecs.append(v)
        meta.append(("filler", -1, True))
    return words, np.array(vecs), meta


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "data" / "toy"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-train", type=int, default=200)
    ap.add_argument("--n-eval", type=int, default=100)
    ap.add_argument("--groups", type=int, default=6)
    ap.add_argument("--common", type=int, default=3)
    ap.add_argument("--rare", type=int, default=5)
    ap.add_argument("--fillers", type=int, default=200)
    ap.add_argument("--shortcut", type=float, default=2.0)
    ap.add_argument("--nuisance", type=float, default=0.6)
    ap.add_argument("--strength", type=float, default=1.5)
    ap.add_argument("--filler-groups", type=int, default=20)
    ap.add_argument("--filler-scale", type=float, default=1.0)
    ap.add_argument("--identity", type=float, default=1.0)
    ap.add_argument("--max-sentiment", type=int, default=2)
    ap.add_argument("--min-len", type=int, default=6)
    ap.add_argument("--max-len", type=int, default=10)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    words, vecs, meta = make_vectors(rng, args)
    # alternative embedding: same centres, fresh nuisance offsets
    alt_rng = np.random.default_rng(args.seed + 1000)
    alt = vecs.copy()
    alt[:, NUIS_DIMS] = alt_rng.normal(scale=args.nuisance + 0.2, size=(len(words), 8))
    alt[:, 1:8] += alt_rng.normal(scale=0.3, size=(len(words), 7))

    common = {"pos": [], "neg": []}
    for w, (pol, _g, is_common) in zip(words, meta):
        if pol in common and is_common:
            common[pol].append(w)
    fillers = [w for w, m in zip(words, meta) if m[0] == "filler"]

    def sentence(label):
        pol = "pos" if label == 1 else "neg"
        n = int(rng.integers(args.min_len, args.max_len + 1))
        k = int(rng.integers(1, args.max_sentiment + 1))
        toks = list(rng.choice(fillers, size=n - k, replace=True))
        for _ in range(k):
            toks.insert(int(rng.integers(0, len(toks) + 1)), str(rng.choice(common[pol])))
        return " ".join(toks)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, n in (("train.tsv", args.n_train), ("eval.tsv", args.n_eval)):
        labels = np.array([0, 1] * (n // 2) + [0] * (n % 2))
        rng.shuffle(labels)
        with (out / name).open("w", encoding="utf-8") as fh:
            for y in labels:
                fh.write(f"{int(y)}\t{sentence(int(y))}\n")
    for name, table in (("embeddings.txt", vecs), ("embeddings_alt.txt", alt)):
        with (out / name).open("w", encoding="utf-8") as fh:
            fh.write(f"{len(words)} {DIM}\n")
            for w, v in zip(words, table):
                fh.write(w + " " + " ".join(f"{x:.6f}" for x in v) + "\n")
    print(f"wrote {len(words)}-word vocabulary and {args.n_train}/{args.n_eval} examples to {out}")


if __name__ == "__main__":
    main()
