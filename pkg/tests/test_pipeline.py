import random
import warnings

import numpy as np
import pytest
from scipy import stats

import oracles as O
from conftest import random_stream, random_topology
from frigate.graph import MISSING, Topology
from frigate.pipeline import (BucketSpec, DataError, PerturbSpec, SyntheticSpec, bucketize,
                              drop_snapshots, export, generate_synthetic, gini, ingest,
                              perturb_topology, plan_perturbation, top_share, write_topology)


@pytest.fixture
def files(tmp_path):
    topo = random_topology(4, 0)
    write_topology(topo, tmp_path)
    return topo, tmp_path


def write_readings(path, rows, header="node_id,timestamp,value"):
    path.write_text("\n".join([header] + [",".join(map(str, r)) for r in rows]) + "\n")
    return path


def test_empty_readings_give_missing_stream(files):
    topo, d = files
    r = write_readings(d / "readings.csv", [])
    s = ingest(d / "nodes.csv", d / "edges.csv", r, t_lo=0, t_hi=3)
    assert len(s) == 4
    assert all(x is MISSING for snap in s for x in snap.readings.values())


def test_duplicate_records_sum(files):
    topo, d = files
    v = topo.node_ids[1]
    r = write_readings(d / "readings.csv", [(v, 5, 3), (v, 5, 4), (topo.node_ids[0], 6, 1)])
    s = ingest(d / "nodes.csv", d / "edges.csv", r)
    assert s.at(5).readings[v] == 7.0
    assert s.at(6).readings[v] is MISSING


def test_ingest_is_order_independent(files):
    topo, d = files
    rng = random.Random(0)
    rows = [(rng.choice(topo.node_ids), rng.randrange(10), rng.randrange(1, 9)) for _ in range(60)]
    base = ingest(d / "nodes.csv", d / "edges.csv", write_readings(d / "a.csv", rows))
    for k in range(3):
        rng.shuffle(rows)
        other = ingest(d / "nodes.csv", d / "edges.csv", write_readings(d / f"b{k}.csv", rows))
        for a, b in zip(base, other):
            assert a.readings == b.readings


def test_seconds_are_bucketed(files):
    topo, d = files
    v = topo.node_ids[0]
    r = write_readings(d / "raw.csv", [(v, 10, 1), (v, 299, 2), (v, 300, 5)])
    s = ingest(d / "nodes.csv", d / "edges.csv", r, BucketSpec(300))
    assert s.at(0).readings[v] == 3.0 and s.at(1).readings[v] == 5.0
    out = d / "b.csv"
    assert bucketize(r, out, BucketSpec(300)) == 2
    assert out.read_text().splitlines()[1:] == [f"{v},0,3.0", f"{v},1,5.0"]
    with pytest.raises(ValueError):
        BucketSpec(0)


@pytest.mark.parametrize("rows,line", [
    ([("zz", 1, 2)], 2),
    ([("n?", 1, 2)], 2),
    ([(None, "x", 2)], 3),
    ([(None, 1, "abc")], 3),
])
def test_malformed_rows_report_line(files, rows, line):
    topo, d = files
    good = (topo.node_ids[0], 0, 1)
    rows = [(topo.node_ids[0] if r[0] is None else r[0], r[1], r[2]) for r in rows]
    if line == 3:
        rows = [good] + rows
    r = write_readings(d / "bad.csv", rows)
    with pytest.raises(DataError, match=rf"bad\.csv:{line}:"):
        ingest(d / "nodes.csv", d / "edges.csv", r)


def test_bad_header_and_edges(files):
    topo, d = files
    with pytest.raises(DataError, match=":1:"):
        ingest(d / "nodes.csv", d / "edges.csv", write_readings(d / "r.csv", [], "node,t,v"))
    (d / "edges2.csv").write_text("src,dst,length_km\nn_a,n_b,1.0\n")
    with pytest.raises(DataError, match="edges2.csv:2:"):
        ingest(d / "nodes.csv", d / "edges2.csv", write_readings(d / "r.csv", []))


def test_export_roundtrip(tmp_path):
    topo = random_topology(6, 3)
    s = random_stream(topo, 9, seed=2, missing=0.3)
    export(s, tmp_path)
    back = ingest(tmp_path / "nodes.csv", tmp_path / "edges.csv", tmp_path / "readings.csv")
    assert back.timestamps == s.timestamps
    assert back[0].topology.key() == topo.key()
    for a, b in zip(s, back):
        assert a.readings == b.readings


def test_zero_trips_give_zero_readings():
    d = generate_synthetic(SyntheticSpec(num_nodes=12, num_days=1, trips_per_bucket=0.0))
    v, p = d.stream.value_matrix()
    assert p.all() and (v == 0).all()


@pytest.mark.parametrize("seed", range(4))
def test_single_trip_on_path_counts_each_node_once(seed):
    d = generate_synthetic(SyntheticSpec(num_nodes=7, graph_model="path", num_trips=1, num_days=1,
                                         seed=seed))
    v, _ = d.stream.value_matrix()
    per_node = v.sum(axis=0)
    assert set(per_node.tolist()) <= {0.0, 1.0}
    on = np.flatnonzero(per_node)
    assert len(on) >= 2 and (np.diff(on) == 1).all()
    assert np.count_nonzero(v.sum(axis=1)) == 1
    assert d.edge_flow.sum() == len(on) - 1


def test_synthetic_readings_are_nonnegative_integers_and_deterministic():
    spec = SyntheticSpec(num_nodes=20, num_days=1, trips_per_bucket=50.0, seed=3)
    a = generate_synthetic(spec)
    b = generate_synthetic(spec)
    v, _ = a.stream.value_matrix()
    assert (v >= 0).all() and (v == np.rint(v)).all()
    assert np.array_equal(v, b.stream.value_matrix()[0])


def test_er_model_is_strongly_connected():
    d = generate_synthetic(SyntheticSpec(num_nodes=25, graph_model="er", num_days=1,
                                         trips_per_bucket=5.0, seed=1))
    assert d.topology.num_nodes == 25


@pytest.mark.parametrize("seed", range(5))
def test_edge_flow_is_heavy_tailed(seed):
    d = generate_synthetic(SyntheticSpec(num_nodes=60, num_days=1, seed=seed))
    assert gini(d.edge_flow) >= 0.5
    assert top_share(d.edge_flow, 0.1) >= 0.4


def test_gini_matches_loop():
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = rng.pareto(1.5, size=30)
        assert gini(x) == pytest.approx(O.gini_loop(x.tolist()), rel=1e-12)
    assert gini(np.ones(8)) == pytest.approx(0.0, abs=1e-12)
    assert top_share(np.array([10.0] + [0.0] * 9)) == 1.0


def grid_with_lengths(n_edges, seed):
    rng = np.random.default_rng(seed)
    side = 12
    ids = [f"g{r}_{c}" for r in range(side) for c in range(side)]
    coords = {f"g{r}_{c}": (30.6 + 0.005 * r, 104.0 + 0.005 * c) for r in range(side) for c in range(side)}
    pairs = []
    for r in range(side):
        for c in range(side):
            if c + 1 < side:
                pairs.append((f"g{r}_{c}", f"g{r}_{c + 1}"))
            if r + 1 < side:
                pairs.append((f"g{r}_{c}", f"g{r + 1}_{c}"))
    pick = rng.choice(len(pairs), size=n_edges, replace=False)
    edges = [pairs[i] if rng.random() < 0.5 else pairs[i][::-1] for i in pick]
    lengths = {e: float(rng.gamma(3.0, 0.2)) for e in edges}
    return Topology(ids, edges, lengths, coords)


def test_perturb_zero_is_identity():
    topo = grid_with_lengths(200, 0)
    s = random_stream(topo, 3)
    assert perturb_topology(s, PerturbSpec(x=0)) is s


@pytest.mark.parametrize("seed", range(3))
def test_perturb_counts_and_invariants(seed):
    topo = grid_with_lengths(200, seed)
    s = random_stream(topo, 3)
    out = perturb_topology(s, PerturbSpec(x=10, seed=seed))
    new = out[0].topology
    assert all(snap.topology is new for snap in out)
    assert new.num_edges == 200 and new.node_ids == topo.node_ids
    old = set(topo.edges)
    dropped = old - set(new.edges)
    added = set(new.edges) - old
    assert len(dropped) == len(added) == 10
    linked = {frozenset(e) for e in topo.edges}
    thr = 2 * float(np.median(topo.length_array))
    for u, v in added:
        assert frozenset((u, v)) not in linked
        assert O.great_circle_km(topo.coords[u], topo.coords[v]) <= thr + 1e-9
        assert new.lengths[(u, v)] in set(topo.length_array.tolist())
    for a, b in zip(s, out):
        assert a.readings == b.readings


def test_added_lengths_follow_original_distribution():
    topo = grid_with_lengths(200, 0)
    drawn = []
    for seed in range(20):
        drawn += [x for _, _, x in plan_perturbation(topo, PerturbSpec(x=10, seed=seed)).added]
    assert stats.ks_2samp(drawn, topo.length_array).statistic <= 0.2


def test_perturb_warns_on_partial_add():
    t = Topology(["a", "b", "c"], [("a", "b"), ("b", "a"), ("b", "c"), ("c", "b")], [1.0] * 4,
                 {"a": (30.0, 104.0), "b": (30.0, 104.01), "c": (30.0, 104.02)})
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        plan = plan_perturbation(t, PerturbSpec(x=100, threshold_km=0.1, seed=0))
    assert plan.requested == 2 and len(plan.added) == 0
    assert any("adding 0 of 2" in str(x.message) for x in w)
    with pytest.raises(ValueError):
        plan_perturbation(t, PerturbSpec(x=1))
    with pytest.raises(ValueError):
        PerturbSpec(x=120)


def test_drop_snapshots_counts():
    s = random_stream(random_topology(3, 0), 12)
    assert drop_snapshots(s, 0.0) == list(s)
    kept = drop_snapshots(s, 1 / 3, seed=5)
    assert len(kept) == 8
    assert [x.timestamp for x in kept] == sorted(x.timestamp for x in kept)
    with pytest.raises(ValueError):
        drop_snapshots(s, 1.0)


def test_drop_snapshots_position_frequency():
    s = list(random_stream(random_topology(3, 0), 12))
    hits = np.zeros(12)
    trials = 3000
    for seed in range(trials):
        kept = {x.timestamp for x in drop_snapshots(s, 1 / 3, seed=seed)}
        hits += [t not in kept for t in range(12)]
    freq = hits / trials
    assert np.abs(freq - 1 / 3).max() < 0.04
