import math

import pytest
import torch

from robustdistill.contrastive import (MemoryQueue, build_pair_sets, contrastive_loss,
                                       cosine_similarity, enqueue, mean_match_loss,
                                       pairwise_cosine, retrieve_hard_negatives)
from robustdistill.errors import ContractError


def vec(*vals):
    return torch.tensor(vals, dtype=torch.float64)


# -- cosine ----------------------------------------------------------------------


def test_cosine_examples():
    u = vec(0.3, -0.4, 1.2)
    assert cosine_similarity(u, u) == pytest.approx(1.0)
    assert cosine_similarity(vec(1, 0), vec(0, 1)) == pytest.approx(0.0)
    assert cosine_similarity(u, -u) == pytest.approx(-1.0)


def test_cosine_zero_vector_warns_and_returns_zero():
    with pytest.warns(RuntimeWarning):
        assert cosine_similarity(vec(0, 0), vec(1, 2)) == 0.0


# -- queue -----------------------------------------------------------------------


def make_queue(num_classes=3, dim=4, capacity=5, proxy_dim=2, seed=0):
    return MemoryQueue(num_classes, dim, capacity, proxy_dim, seed)


def test_fifo_eviction():
    q = make_queue(capacity=2)
    e = [torch.rand(4, dtype=torch.float64) for _ in range(3)]
    for emb in e:
        enqueue(q, 0, emb)
    kept = [entry[0] for entry in q.entries(0)]
    assert len(kept) == 2
    assert torch.equal(kept[0], e[1]) and torch.equal(kept[1], e[2])


def test_stored_proxy_is_projection_of_embedding():
    q = make_queue()
    emb = torch.rand(4, dtype=torch.float64)
    enqueue(q, 1, emb)
    stored_emb, proxy, _ = q.entries(1)[0]
    assert torch.equal(proxy, q.projection @ emb)
    assert torch.equal(stored_emb, emb)


def test_per_class_isolation():
    q = make_queue()
    enqueue(q, 0, torch.rand(4, dtype=torch.float64))
    assert q.class_size(0) == 1 and q.class_size(1) == 0 and q.class_size(2) == 0


def test_survivors_are_exactly_the_last_q():
    capacity = 4
    q = make_queue(capacity=capacity)
    n = 11
    for i in range(n):
        enqueue(q, 2, torch.full((4,), float(i), dtype=torch.float64))
    ids = [entry[2] for entry in q.entries(2)]
    assert ids == list(range(n - capacity, n))
    assert q.class_size(2) == capacity


def test_enqueue_class_out_of_range():
    q = make_queue()
    with pytest.raises(ContractError):
        enqueue(q, 3, torch.rand(4, dtype=torch.float64))


def test_enqueue_detaches_gradient():
    q = make_queue()
    emb = torch.rand(4, dtype=torch.float64, requires_grad=True)
    enqueue(q, 0, emb)
    assert not q.entries(0)[0][0].requires_grad


# -- retrieval -------------------------------------------------------------------


def test_retrieve_empty_queue():
    q = make_queue()
    embs, ids = retrieve_hard_negatives(q, torch.rand(4, dtype=torch.float64), 0, 3)
    assert embs == [] and ids == []


def test_retrieve_exhaustive_when_k_large(gen):
    q = make_queue()
    for c in (1, 2):
        for _ in range(3):
            enqueue(q, c, torch.rand(4, generator=gen, dtype=torch.float64))
    anchor = torch.rand(4, generator=gen, dtype=torch.float64)
    embs, ids = retrieve_hard_negatives(q, anchor, 0, 100)
    assert len(embs) == 6
    proxy = q.projection @ anchor
    sims = [float(pairwise_cosine(proxy.reshape(1, -1),
                                  (q.projection @ e).reshape(1, -1))) for e in embs]
    assert all(sims[i] >= sims[i + 1] - 1e-12 for i in range(len(sims) - 1))


def test_retrieve_excludes_anchor_class(gen):
    q = make_queue()
    for c in range(3):
        enqueue(q, c, torch.rand(4, generator=gen, dtype=torch.float64))
    _, ids = retrieve_hard_negatives(q, torch.rand(4, generator=gen, dtype=torch.float64), 1, 10)
    stored = {entry[2] for entry in q.entries(1)}
    assert not stored & set(ids)


def brute_force_topk(queue, anchor, anchor_class, k):
    proxy = queue.projection @ anchor
    rows = []
    for c in range(queue.num_classes):
        if c == anchor_class:
            continue
        for emb, p, eid in queue.entries(c):
            sim = float((proxy @ p) / max(float(proxy.norm() * p.norm()), 1e-300))
            if float(proxy.norm()) == 0.0 or float(p.norm()) == 0.0:
                sim = 0.0
            rows.append((-sim, eid))
    rows.sort()
    return [eid for _, eid in rows[:k]]


def test_retrieval_equals_brute_force_on_random_states(gen):
    for trial in range(500):
        num_classes = int(torch.randint(2, 5, (1,), generator=gen))
        q = MemoryQueue(num_classes, 6, capacity=8, proxy_dim=3, seed=trial)
        n = int(torch.randint(0, 20, (1,), generator=gen))
        for _ in range(n):
            c = int(torch.randint(num_classes, (1,), generator=gen))
            enqueue(q, c, torch.randn(6, generator=gen, dtype=torch.float64))
        anchor = torch.randn(6, generator=gen, dtype=torch.float64)
        anchor_class = int(torch.randint(num_classes, (1,), generator=gen))
        k = int(torch.randint(1, 6, (1,), generator=gen))
        _, ids = retrieve_hard_negatives(q, anchor, anchor_class, k)
        assert ids == brute_force_topk(q, anchor, anchor_class, k)


# -- pair sets -------------------------------------------------------------------


def embs(n, d=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn((n, d), generator=g, dtype=torch.float64)


def test_pair_sets_singleton_batch():
    ps, embeddings = build_pair_sets(embs(1), embs(1, seed=1), torch.tensor([0]))
    assert ps.positives == [[1]]
    assert ps.candidates == [[1]]
    assert embeddings.shape == (2, 4)


def test_pair_sets_same_class_pair():
    ps, _ = build_pair_sets(embs(2), embs(2, seed=1), torch.tensor([1, 1]))
    assert sorted(ps.positives[0]) == [1, 2, 3]  # own adv, mate clean, mate adv
    assert sorted(ps.candidates[0]) == [1, 2, 3]


def test_pair_sets_cross_class_pair():
    ps, _ = build_pair_sets(embs(2), embs(2, seed=1), torch.tensor([0, 1]))
    assert ps.positives[0] == [2]
    assert len(ps.candidates[0]) == 3
    assert 0 not in ps.candidates[0]  # anchor never its own candidate


def test_pair_sets_misaligned_inputs():
    with pytest.raises(ContractError):
        build_pair_sets(embs(2), embs(3), torch.tensor([0, 1]))


def test_pair_sets_symmetric_anchors():
    ps, _ = build_pair_sets(embs(2), embs(2, seed=1), torch.tensor([0, 1]),
                            symmetric_anchors=True)
    assert ps.anchors == [0, 1, 2, 3]
    assert ps.positives[2] == [0]  # adversarial anchor pairs back to its clean twin


def test_pair_sets_queue_only_candidate_bound(gen):
    m, k = 5, 2
    retrieved = [[torch.randn(4, generator=gen, dtype=torch.float64) for _ in range(k)]
                 for _ in range(m)]
    labels = torch.tensor([0, 0, 1, 2, 1])
    ps, _ = build_pair_sets(embs(m), embs(m, seed=2), labels, retrieved,
                            queue_only_negatives=True)
    for pos, cand in zip(ps.positives, ps.candidates):
        assert len(cand) <= len(pos) + k


def test_pair_sets_default_candidate_bound(gen):
    m, k = 4, 3
    retrieved = [[torch.randn(4, generator=gen, dtype=torch.float64) for _ in range(k)]
                 for _ in range(m)]
    ps, _ = build_pair_sets(embs(m), embs(m, seed=2), torch.tensor([0, 1, 0, 1]), retrieved)
    for cand in ps.candidates:
        assert len(cand) <= 2 * m + k  # in-batch entries plus retrieved


# -- loss ------------------------------------------------------------------------


def test_uniform_similarity_loss_is_log_candidate_count():
    # identical embeddings: every similarity is 1, softmax is uniform
    e = torch.ones((3, 4), dtype=torch.float64)
    ps, embeddings = build_pair_sets(e, e.clone(), torch.tensor([0, 1, 2]))
    loss = contrastive_loss(embeddings, ps, tau=0.5)
    expected = sum(math.log(len(c)) for c in ps.candidates) / 3
    assert float(loss) == pytest.approx(expected, abs=1e-9)


def test_scalar_two_candidate_example():
    # one anchor, positive at similarity 1, one negative at similarity 0, tau=1:
    # frozen one-line oracle value -log(e / (e + 1)) = log(1 + e^-1)
    anchor = vec(1.0, 0.0)
    pos = vec(2.0, 0.0)  # cosine 1 with anchor
    neg = vec(0.0, 3.0)  # cosine 0 with anchor
    embeddings = torch.stack([anchor, pos, neg])
    from robustdistill.contrastive import PairSets

    ps = PairSets(anchors=[0], positives=[[1]], candidates=[[1, 2]])
    loss = contrastive_loss(embeddings, ps, tau=1.0)
    assert float(loss) == pytest.approx(0.31326168751822286, abs=1e-9)


def test_raising_positive_similarity_decreases_loss():
    anchor = vec(1.0, 0.0, 0.0)
    neg = vec(0.0, 1.0, 0.0)
    from robustdistill.contrastive import PairSets

    ps = PairSets([0], [[1]], [[1, 2]])
    losses = []
    for t in (0.0, 0.5, 0.9):
        # slide the positive from the negative's direction toward the anchor's
        pos = (1 - t) * vec(0.0, 1.0, 0.0) + t * vec(1.0, 0.0, 0.0)
        embeddings = torch.stack([anchor, pos, neg])
        losses.append(float(contrastive_loss(embeddings, ps, tau=0.3)))
    assert losses[0] > losses[1] > losses[2]


def test_loss_invariant_to_positive_rescaling(gen):
    e_clean, e_adv = embs(4, seed=3), embs(4, seed=4)
    ps, embeddings = build_pair_sets(e_clean, e_adv, torch.tensor([0, 1, 0, 1]))
    base = float(contrastive_loss(embeddings, ps, tau=0.2))
    for row in range(embeddings.shape[0]):
        scaled = embeddings.clone()
        scaled[row] *= 37.5
        assert float(contrastive_loss(scaled, ps, tau=0.2)) == pytest.approx(base, abs=1e-9)


def test_empty_positive_set_rejected():
    from robustdistill.contrastive import PairSets

    with pytest.raises(ContractError):
        contrastive_loss(embs(2), PairSets([0], [[]], [[1]]), tau=0.5)
    with pytest.raises(ContractError):
        contrastive_loss(embs(2), PairSets([0], [[1]], [[1]]), tau=0.0)


def test_gradient_matches_central_differences(gen):
    for trial in range(20):
        g = torch.Generator().manual_seed(trial)
        m = int(torch.randint(2, 4, (1,), generator=g))
        labels = torch.randint(0, 2, (m,), generator=g)
        clean = torch.randn((m, 3), generator=g, dtype=torch.float64)
        adv = torch.randn((m, 3), generator=g, dtype=torch.float64)
        retrieved = [[torch.randn(3, generator=g, dtype=torch.float64)] for _ in range(m)]
        ps, embeddings = build_pair_sets(clean, adv, labels, retrieved)
        free = embeddings.detach().clone().requires_grad_(True)
        loss = contrastive_loss(free, ps, tau=0.4)
        loss.backward()
        analytic = free.grad.clone()
        h = 1e-5
        numeric = torch.zeros_like(analytic)
        flat = embeddings.detach().clone().reshape(-1)
        for i in range(flat.numel()):
            vals = []
            for sgn in (1.0, -1.0):
                bumped = flat.clone()
                bumped[i] += sgn * h
                vals.append(float(contrastive_loss(bumped.reshape(embeddings.shape),
                                                   ps, tau=0.4)))
            numeric.reshape(-1)[i] = (vals[0] - vals[1]) / (2 * h)
        rel = (analytic - numeric).norm() / max(float(numeric.norm()), 1e-12)
        assert rel < 1e-4


def test_no_gradient_reaches_queue_entries(gen):
    q = make_queue(num_classes=2, dim=3)
    for _ in range(4):
        enqueue(q, 1, torch.randn(3, generator=gen, dtype=torch.float64))
    clean = torch.randn((2, 3), generator=gen, dtype=torch.float64, requires_grad=True)
    adv = torch.randn((2, 3), generator=gen, dtype=torch.float64, requires_grad=True)
    labels = torch.tensor([0, 0])
    retrieved = [retrieve_hard_negatives(q, clean[i].detach(), 0, 2)[0] for i in range(2)]
    ps, embeddings = build_pair_sets(clean, adv, labels, retrieved)
    contrastive_loss(embeddings, ps, tau=0.3).backward()
    assert clean.grad is not None and adv.grad is not None
    for emb, _, _ in q.entries(1):
        assert not emb.requires_grad


# -- mean matching ------------------------------------------------------------------


def test_mean_match_identity_is_zero(gen):
    e = embs(6, seed=5)
    labels = torch.tensor([0, 0, 1, 1, 2, 2])
    assert float(mean_match_loss(e, e.clone(), labels)) == 0.0


def test_mean_match_unit_shift_is_one():
    clean = torch.zeros((3, 4), dtype=torch.float64)
    adv = torch.zeros((3, 4), dtype=torch.float64)
    adv[:, 2] = 1.0  # means differ by a unit vector
    labels = torch.zeros(3, dtype=torch.int64)
    assert float(mean_match_loss(clean, adv, labels)) == pytest.approx(1.0)


def test_mean_match_permutation_invariance(gen):
    clean, adv = embs(6, seed=6), embs(6, seed=7)
    labels = torch.tensor([0, 1, 0, 1, 0, 1])
    base = float(mean_match_loss(clean, adv, labels))
    perm = torch.tensor([2, 1, 0, 5, 4, 3])  # permutes within classes
    assert float(mean_match_loss(clean[perm], adv[perm], labels[perm])) == pytest.approx(
        base, abs=1e-12)


def test_mean_match_skips_one_sided_class():
    clean = embs(2, seed=8)
    adv = embs(1, seed=9)
    with pytest.warns(RuntimeWarning):
        loss = mean_match_loss(clean, adv, torch.tensor([0, 1]), torch.tensor([0]))
    lone = float((clean[0] - adv[0]).pow(2).sum())
    assert float(loss) == pytest.approx(lone)
