"""
Retrieval metrics on a handful of rankings
==========================================

Each ranking is a list of relevance flags, one per result, in the order the
engine returned them. Precision divides by the number actually retrieved once
the cutoff runs past the end of the list.
"""

from risbench.metrics import JudgedRanking, QueryOutcome, mean_with_standard_error, mrr, precision_at_k, reciprocal_rank, retrievability

rankings = {
    "hit first": JudgedRanking((True, False, False, False, False)),
    "hit third": JudgedRanking((False, False, True, False)),
    "two results, both hits": JudgedRanking((True, True)),
    "nothing relevant": JudgedRanking((False,) * 10),
    "engine returned nothing": JudgedRanking(()),
}

print(f"{'ranking':<26}" + "".join(f"P@{k:<5}" for k in (1, 3, 5, 10)) + "RR")
for name, r in rankings.items():
    cells = "".join(f"{precision_at_k(r, k):<7.3f}" for k in (1, 3, 5, 10))
    print(f"{name:<26}{cells}{reciprocal_rank(r):.3f}")

print("\nMRR over all five:", mrr(list(rankings.values())))

# retrievability of one image: each query that surfaces it within c counts once
outcomes = [QueryOutcome(r.first_relevant_rank) for r in rankings.values()]
for c in (1, 3, 10):
    print(f"r(c={c}) =", retrievability(outcomes, c))

# the report plots means with standard-error bars
rr = [reciprocal_rank(r) for r in rankings.values()]
mean, se = mean_with_standard_error(rr)
print(f"\nmean RR {mean:.4f} +/- {se:.4f}")
