import numpy as np
import pytest

from fragmix import _accel
from fragmix import retrieval as rv
from fragmix.errors import ConfigError, DataError, DimensionError
from fragmix.model import Model, ModelConfig
from fragmix.retrieval import (
    DescriptorSet,
    apply_whiten,
    evaluate_descriptors,
    extract_descriptors,
    fit_whiten,
    format_report_kv,
    format_table,
    load_descriptors,
    parse_report_kv,
    rank_leave_one_out,
    ranked_indices,
    save_descriptors,
)
from fragmix.data import FragmentRecord

from oracles import brute_force_ap


def make_set(matrix, writers, pages=None, ids=None):
    n = len(matrix)
    ids = ids or [f"f{i:03d}" for i in range(n)]
    pages = pages or [f"{w}_p" for w in writers]
    return DescriptorSet(np.asarray(matrix), ids, list(writers), list(pages))


def oracle_scores(m):
    m = np.asarray(m, dtype=np.float64)
    n = len(m)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            out[i, j] = sum(m[i] * m[j]) / np.sqrt(sum(m[i] ** 2) * sum(m[j] ** 2))
    return out


def random_instance(rng, tied):
    n = int(rng.integers(2, 31))
    if tied:
        # rows drawn from a few axis directions: cosine is exactly 0 or 1, so ties abound
        axes = rng.integers(0, 3, size=n)
        m = np.eye(4)[axes] * rng.integers(1, 4, size=(n, 1))
    else:
        m = rng.standard_normal((n, int(rng.integers(2, 9))))
    labels = [f"w{v}" for v in rng.integers(0, int(rng.integers(1, 6)), size=n)]
    ids = [f"id{v:03d}" for v in rng.permutation(n)]
    return m, labels, ids


def check_against_oracle(rng, tied, kernel=None):
    m, labels, ids = random_instance(rng, tied)
    ds = make_set(m, labels, ids=ids)
    rep = rank_leave_one_out(ds, "writer", kernel=kernel)
    scores = oracle_scores(ds.matrix)
    aps, tops = [], []
    for q in range(len(labels)):
        ap, top = brute_force_ap(scores[q], labels, ids, q)
        if ap is None:
            assert np.isnan(rep.average_precision[q])
            continue
        assert rep.average_precision[q] == pytest.approx(ap, abs=1e-12)
        assert rep.top1_hits[q] == top
        aps.append(ap)
        tops.append(top)
    assert rep.valid_queries == len(aps)
    if aps:
        assert rep.mAP == pytest.approx(np.mean(aps), abs=1e-12)
        assert rep.top1 == pytest.approx(np.mean(tops), abs=1e-12)


# -- ranking ----------------------------------------------------------------------


def test_hand_case_ap_five_sixths():
    # query f0: ranked f1 (same), f2 (other), f3 (same)
    m = [[1.0, 0.0], [0.9, 0.1], [0.5, 0.5], [0.1, 0.9]]
    rep = rank_leave_one_out(make_set(m, ["a", "a", "b", "a"]), "writer")
    assert rep.average_precision[0] == pytest.approx(5 / 6, abs=1e-15)


@pytest.mark.parametrize("tied", [False, True])
def test_engine_matches_brute_force(tied):
    rng = np.random.default_rng(17 + tied)
    for _ in range(50):
        check_against_oracle(rng, tied)


@pytest.mark.parametrize("impl", ["numpy", "numba"])
def test_both_kernels_match_oracle(impl):
    if impl == "numba" and not _accel.HAVE_NUMBA:
        pytest.skip("numba not installed")
    kernel = rv._ap_numpy if impl == "numpy" else rv._ap_numba
    rng = np.random.default_rng(99)
    for i in range(20):
        check_against_oracle(rng, tied=bool(i % 2), kernel=kernel)


def test_tie_break_by_fragment_id():
    m = np.tile([[1.0, 0.0]], (4, 1))
    ds = make_set(m, ["a", "b", "a", "b"], ids=["d", "c", "b", "a"])
    assert [ds.fragment_ids[i] for i in ranked_indices(ds, 0)] == ["a", "b", "c"]
    rep = rank_leave_one_out(ds, "writer")
    # query "d" (writer a): ranked a(b), b(a), c(b) -> relevant at rank 2 only
    assert rep.average_precision[0] == pytest.approx(0.5)


def test_query_never_ranks_itself():
    rng = np.random.default_rng(0)
    ds = make_set(rng.standard_normal((12, 5)), ["a", "b", "c"] * 4)
    for q in range(12):
        ranked = ranked_indices(ds, q)
        assert q not in ranked and len(ranked) == 11


def test_ranking_invariant_to_positive_scaling():
    rng = np.random.default_rng(1)
    m = rng.standard_normal((15, 6))
    writers = list("abcde") * 3
    a = make_set(m, writers)
    b = make_set(m * 7.5, writers)
    for q in range(15):
        assert np.array_equal(ranked_indices(a, q), ranked_indices(b, q))


def test_perfect_clusters_score_one():
    m = np.repeat(np.eye(3), 2, axis=0)
    rep = rank_leave_one_out(make_set(m, ["a", "a", "b", "b", "c", "c"]), "writer")
    assert rep.mAP == 1.0 and rep.top1 == 1.0


def test_all_singletons_give_empty_report(caplog):
    rep = rank_leave_one_out(make_set(np.eye(3), ["a", "b", "c"]), "writer")
    assert rep.valid_queries == 0 and rep.mAP == 0.0
    assert "no query has a relevant item" in caplog.text


def test_page_labels_are_used_for_page_report():
    m = np.array([[1.0, 0.0], [1.0, 0.01], [0.0, 1.0], [0.01, 1.0]])
    ds = make_set(m, ["a", "a", "a", "a"], pages=["p1", "p1", "p2", "p2"])
    assert rank_leave_one_out(ds, "page").mAP == 1.0
    assert rank_leave_one_out(ds, "writer").mAP == 1.0
    ds2 = make_set(m, ["a", "b", "a", "b"], pages=["p1", "p1", "p2", "p2"])
    assert rank_leave_one_out(ds2, "page").mAP == 1.0
    assert rank_leave_one_out(ds2, "writer").mAP < 1.0


def test_too_few_descriptors():
    with pytest.raises(ConfigError):
        rank_leave_one_out(make_set([[1.0, 0.0]], ["a"]), "writer")


# -- whitening ------------------------------------------------------------------------


def test_whitening_unit_variance():
    x = np.random.default_rng(0).standard_normal((500, 64)) @ np.diag(np.linspace(0.5, 3, 64))
    t = fit_whiten(x, d=16)
    z = t.transform(x)
    assert z.shape == (500, 16)
    np.testing.assert_allclose(z.var(axis=0, ddof=1), 1.0, atol=1e-2)
    np.testing.assert_allclose(np.corrcoef(z.T), np.eye(16), atol=1e-8)


def test_whitening_projection_rows_orthogonal_before_scaling():
    x = np.random.default_rng(1).standard_normal((80, 10))
    t = fit_whiten(x, d=6)
    rows = t.projection * np.sqrt(t.eigenvalues + t.eps)[:, None]
    np.testing.assert_allclose(rows @ rows.T, np.eye(6), atol=1e-10)


def test_refit_after_whitening_is_uniform():
    x = np.random.default_rng(2).standard_normal((300, 12)) * np.arange(1, 13)
    z = fit_whiten(x, d=8).transform(x)
    t2 = fit_whiten(z, d=8)
    np.testing.assert_allclose(t2.eigenvalues, 1.0, atol=1e-8)


def test_rank_one_data_single_component():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((40, 1)) @ rng.standard_normal((1, 5))
    t = fit_whiten(x, d=1)
    ev = np.linalg.eigvalsh(np.cov(x.T))
    assert t.eigenvalues[0] == pytest.approx(ev.sum(), rel=1e-9)


def test_zero_variance_direction_dropped():
    rng = np.random.default_rng(4)
    x = np.zeros((30, 4))
    x[:, :2] = rng.standard_normal((30, 2))
    t = fit_whiten(x, d=3)
    assert np.all(t.projection[2] == 0)


def test_whitening_dim_bound():
    with pytest.raises(ConfigError, match=r"min\(N-1, D\)\] = \[1, 9\]"):
        fit_whiten(np.random.default_rng(0).standard_normal((10, 20)), d=10)


def test_apply_whiten_dim_mismatch():
    t = fit_whiten(np.random.default_rng(0).standard_normal((20, 4)), d=2)
    with pytest.raises(DimensionError):
        apply_whiten(t, make_set(np.ones((3, 5)), ["a", "b", "c"]))


def test_default_whitening_is_256():
    rng = np.random.default_rng(5)
    m = rng.standard_normal((300, 512))
    ds = make_set(m / np.linalg.norm(m, axis=1, keepdims=True), [f"w{i % 10}" for i in range(300)])
    rep = evaluate_descriptors(ds)["writer"]
    assert rep.meta["whiten_dim"] == 256 and rep.meta["descriptor_dim"] == 256


def test_whitening_clamped_on_small_gallery(caplog):
    m = np.random.default_rng(6).standard_normal((20, 8))
    ds = make_set(m / np.linalg.norm(m, axis=1, keepdims=True), ["a", "b"] * 10)
    reps = evaluate_descriptors(ds, whiten_dim=256)
    assert reps["writer"].meta["whiten_dim"] == 8
    assert "exceeds" in caplog.text


def test_disabling_whitening_keeps_schema():
    m = np.random.default_rng(7).standard_normal((20, 8))
    ds = make_set(m / np.linalg.norm(m, axis=1, keepdims=True), ["a", "b"] * 10)
    on = parse_report_kv(format_report_kv(evaluate_descriptors(ds, whiten_dim=4)["writer"]))
    off = parse_report_kv(format_report_kv(evaluate_descriptors(ds, whiten=False)["writer"]))
    assert off["whiten"] == "false" and on["whiten"] == "true"
    assert {"label_kind", "mAP", "top1", "queries"} <= set(on) & set(off)


# -- descriptor sets and files -----------------------------------------------------------


def test_descriptor_set_validation():
    with pytest.raises(DataError, match="unique"):
        DescriptorSet(np.ones((2, 2)), ["a", "a"], ["w", "w"], ["p", "p"])
    with pytest.raises(DataError, match="entries"):
        DescriptorSet(np.ones((2, 2)), ["a"], ["w", "w"], ["p", "p"])
    with pytest.raises(DataError, match="l2-normalised"):
        DescriptorSet(np.ones((2, 2)), ["a", "b"], ["w", "w"], ["p", "p"]).check_normalized()


def test_descriptor_file_round_trip(tmp_path):
    m = np.random.default_rng(0).standard_normal((5, 3)).astype(np.float32)
    ds = DescriptorSet(m, list("abcde"), list("xxyyz"), list("12345"), {"checkpoint_hash": "abc"})
    path = tmp_path / "d.bin"
    save_descriptors(path, ds)
    back = load_descriptors(path)
    assert np.array_equal(back.matrix, ds.matrix)
    assert (back.fragment_ids, back.writer_ids, back.page_ids) == (ds.fragment_ids, ds.writer_ids, ds.page_ids)
    assert back.meta["checkpoint_hash"] == "abc"


def test_load_descriptors_rejects_other_files(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"hello")
    with pytest.raises(DataError, match="not a fragmix descriptor file"):
        load_descriptors(p)


def test_extract_descriptors_rows_and_duplicates():
    cfg = ModelConfig(input_height=32, input_width=32, backbone_stage_channels=[4, 4, 4, 8],
                      mixer_depth=1, projection_channels=4, projection_map_dim=1)
    model = Model(cfg, seed=0)
    rng = np.random.default_rng(0)
    x = rng.random((5, 3, 32, 32)).astype(np.float32)
    x[3] = x[1]
    recs = [FragmentRecord(f"f{i}", "w", "p") for i in range(5)]
    ds = extract_descriptors(model, x, recs, batch_size=2)
    assert ds.matrix.shape == (5, 4)
    assert np.array_equal(ds.matrix[1], ds.matrix[3])
    assert np.abs(np.linalg.norm(ds.matrix.astype(np.float64), axis=1) - 1).max() < 1e-5
    assert ds.fragment_ids == [r.fragment_id for r in recs]


def test_report_table_layout():
    ds = make_set(np.repeat(np.eye(2), 2, axis=0), ["a", "a", "b", "b"], pages=["1", "1", "2", "3"])
    table = format_table(evaluate_descriptors(ds, whiten=False))
    lines = table.splitlines()
    assert "Writer" in lines[0] and "Page" in lines[0]
    assert lines[1].split("|")[1].split() == ["mAP", "Top-1"]
    assert lines[3].split()[:4] == ["Ours", "|", "100.0", "100.0"]
