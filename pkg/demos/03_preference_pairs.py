"""How preference pairs are mined without labels.

For each training question the unpruned LVLM's answer distribution is the
target. Every candidate caption is scored by how far the compensated
answer distribution drifts from it (mean per-position KL, teacher forced on
the unpruned answer). The closest caption becomes the preferred one and the
farthest the rejected one; DPO then pushes both the caption model and the
selector toward the preferred side.
"""

import numpy as np
from _common import config, parser

from capcomp import vocab
from capcomp.harness.data import gen_synthetic_dataset
from capcomp.harness.experiments import prepare_seed
from capcomp.preference import build_preference_pairs
from capcomp.pruner import PruneConfig, prune

if __name__ == "__main__":
    p = parser(__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=3)
    args = p.parse_args()
    cfg = config(args)
    art = prepare_seed(cfg, args.seed, args.cache_dir)
    lvlm, cap = art.models.lvlm, art.models.captioner
    print(f"{len(art.records)} records mined from {cfg.n_train} training questions")
    kl = np.array([[r.kl_pos, r.kl_neg] for r in art.records])
    print(f"median KL: preferred {np.median(kl[:, 0]):.3f}, rejected {np.median(kl[:, 1]):.3f}")
    for s in gen_synthetic_dataset(args.seed + 100, args.n, "train"):
        v = lvlm.encode_image(s.image)
        pr = prune(v, s.question, lvlm, PruneConfig(0.9375))
        cs = cap.generate_captions(pr.v_l, s.question, beams=cfg.dpo.pool)
        print("\nquestion:", vocab.decode(s.question), "| gold:", vocab.decode(s.answer[:-1]))
        recs = build_preference_pairs(s.sample_id, s.question, lvlm, lvlm.connect(v), pr, cs)
        if not recs:
            print("  skipped: candidates indistinguishable")
            continue
        r = recs[0]
        for i, (c, d) in enumerate(zip(r.captions, r.distances)):
            tag = {r.pos: "preferred", r.neg: "rejected"}.get(i, "")
            print(f"  KL {d:7.4f}  {vocab.decode(vocab.strip_eos(c)):<40} {tag}")
