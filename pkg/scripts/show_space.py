"""Print within/cross-category cosine and each answer's nearest neighbours.

    python scripts/show_space.py --kind cooc --n 5000
"""

import argparse

from semvqa.answer_space import build_answer_space
from semvqa.embedding import build_wordvec_space, cooc_space_from_records, mean_cosines_by_group
from semvqa.synthcp import PriorShiftConfig, WorldSpec, gen_dataset, synthetic_lexicon


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--kind", choices=("cooc", "wordvec"), default="cooc")
    ap.add_argument("--n", type=int, default=5000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--top", type=int, default=3)
    args = ap.parse_args()

    world = WorldSpec()
    records, _ = gen_dataset(world, PriorShiftConfig(), args.n, 1, args.seed)
    answers = build_answer_space(records)
    space = cooc_space_from_records(records, answers) if args.kind == "cooc" else \
        build_wordvec_space(answers, synthetic_lexicon(world))
    cat = world.category_of()
    within, cross = mean_cosines_by_group(space, {answers.index[a]: cat[a] for a in answers.answers})
    print(f"{args.kind}: mean within-category cosine {within:.3f}, cross-category {cross:.3f}")
    for a in answers.answers:
        near = ", ".join(f"{b} {s:.3f}" for b, s in space.nearest(a, args.top))
        print(f"  {a:<18} [{cat[a]}] {near}")


if __name__ == "__main__":
    main()
