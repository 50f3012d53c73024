"""Where the compute goes: analytic FLOPs of the compensated pipeline.

Pruning removes visual tokens before the language model, and the caption
model, beam search and selector add work back. Whether the trade pays off
depends on model scale, so this script prints the same accounting twice:
once with 7B-class reference dimensions and once with the toy dimensions
used everywhere else in this repository.
"""

from capcomp import flops as fl
from capcomp.pruner import retained_count


def show(profile, name, rates=(0.9, 0.9375, 0.96875)):
    print(f"\n== {name} profile: {profile.n_visual} visual tokens ==")
    print(f"{'rate':>8} {'kept':>5} {'pruning only':>13} {'compensated':>12}")
    for rate in rates:
        kept = retained_count(profile.n_visual, rate)
        plain = fl.pipeline_flops(fl.RunShape(kept, 10, 2), profile)
        comp = fl.pipeline_flops(fl.RunShape(kept, 10, 2, caption_len=6, beams=3, candidate_len=7,
                                             selector=True), profile)
        print(f"{rate:8.4f} {kept:5d} {plain.ratio:13.3f} {comp.ratio:12.3f}")
    return comp


if __name__ == "__main__":
    print("A transformer layer over n tokens of width d with FFN width m costs "
          "4nd^2 + 2n^2d + 2ndm multiply-accumulates.")
    print("d=4, m=8, n=2 gives", fl.layer_flops(2, fl.ModelDims(1, 4, 8)))

    ref = show(fl.reference_profile(), "reference")
    print("\nStage breakdown at the highest rate (reference dims):")
    print(ref.table())

    toy = show(fl.toy_profile(), "toy")
    print("\nAt toy scale the compensator stages are as large as the LM they serve, so")
    print("the compensated ratio exceeds 1. Only the reference profile shows savings:")
    for stage, v in toy.stages.items():
        print(f"  {stage:>15}: {v:>10,d}  (baseline {toy.baseline_stages.get(stage, 0):,d})")
