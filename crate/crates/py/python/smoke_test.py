"""Smoke test for the duel extension module. Run after `maturin develop`."""

import math

import duel

vocab = duel.Vocabulary(["a", "b"])
lines = ["ab", "ab", "ba", "aa"]
corpus = [vocab.encode(line) for line in lines]
assert vocab.decode(corpus[2]) == "ba"

tab = duel.Denoiser.fit_tabular(corpus, vocab.size)
assert tab.kind == "tabular" and tab.seq_len == 2

# Exact model with a sequential rule recovers the empirical joint.
rec = duel.exact_loglik(tab, duel.Rule("l2r:k=1"), vocab.encode("ab"))
assert abs(rec["loglik"] - math.log(0.5)) < 1e-12, rec
assert rec["nfe"] == 2 and rec["partition"] == [[1], [2]]

rows = tab.evaluate([vocab.mask_id, vocab.mask_id])
assert all(abs(sum(r) - 1.0) < 1e-12 for r in rows)

assert duel.ordered_bell(3) == 13
assert len(duel.enumerate_ordered_partitions(3)) == 13

trained = duel.Denoiser.trainable(2, 2, hidden=4, seed=1).train(corpus, steps=50, seed=1)
assert duel.Denoiser.from_json(trained.to_json()).to_json() == trained.to_json()

x = vocab.encode("ab")
elbo_nll = duel.elbo_exhaustive(trained, x)
duel_nll = duel.exact_loglik(trained, duel.Rule("greedy:k=1"), x)["nll"]
oracle_nll = duel.oracle_block_search(trained, x, 2)["nll"]
assert oracle_nll <= duel_nll + 1e-12
assert elbo_nll >= -duel.uniform_loglik(trained, x) - 1e-12

tokens, info = duel.sample(trained, duel.Rule("thresh:mu=0.5"), seed=3)
assert len(tokens) == 2 and info["nfe"] >= 1
assert duel.sample(trained, duel.Rule("thresh:mu=0.5"), seed=3)[0] == tokens

assert duel.gap_closed(3.0, 2.0, 1.0) == 50.0
assert duel.gap_closed(1.0, 2.0, 3.0) is None
assert abs(duel.perplexity(2.0 * math.log(2.0), 2) - 2.0) < 1e-12

checks = duel.verify(max_len=3)
assert all(passed for _, passed, _, _ in checks), checks

print("smoke test passed")
