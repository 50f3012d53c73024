"""Follow one question through prune -> caption -> select -> answer.

The toy LVLM sees a 4x4 grid of coloured shapes as 16 visual tokens. At a
93.75% pruning rate only one token survives, so most questions become
unanswerable from the image alone. The caption model reads the discarded
tokens and writes a short description steered by the question; the selector
picks one of the beam-search candidates, and the LVLM answers from the
surviving token plus that caption.
"""

from dataclasses import replace

from _common import parser, seed_artifacts

from capcomp import vocab
from capcomp.harness.pipeline import run_pipeline

if __name__ == "__main__":
    p = parser(__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=4, help="samples to show")
    args = p.parse_args()
    cfg, art = seed_artifacts(args)
    models = art.models
    for s in art.eval_set[: args.n]:
        print("\nscene   :", ", ".join(f"{sh.color} {sh.kind} @c{sh.cell}" for sh in s.scene))
        print("question:", vocab.decode(s.question), "| gold:", vocab.decode(s.answer[:-1]))
        full = models.lvlm.generate(models.lvlm.connect(models.lvlm.encode_image(s.image)),
                                    s.question)[0]
        print("unpruned answer       :", vocab.decode(vocab.strip_eos(full)))
        bare = run_pipeline(s, models, replace(cfg.pipeline, caption=False, guidance=False,
                                               selector=False))
        print(f"kept cells {bare.artifacts['retained']} -> pruned answer:",
              vocab.decode(vocab.strip_eos(bare.answer)))
        r = run_pipeline(s, models, cfg.pipeline)
        for i, (c, lp) in enumerate(zip(r.artifacts["captions"], r.artifacts["caption_logprobs"])):
            mark = "*" if i == r.artifacts["selected"] else " "
            print(f"  {mark} caption {i} (log p {lp:6.2f}): {vocab.decode(vocab.strip_eos(c))}")
        print("compensated answer    :", vocab.decode(vocab.strip_eos(r.answer)),
              "| correct" if r.correct(s) else "| wrong")
        print(f"FLOPs vs unpruned (reference dims): {r.flops.ratio:.3f}")
