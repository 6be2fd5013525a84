import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from oracles import knn_edges, rag_edges

from hact.entity_detect import NucleiSet, SuperpixelMap
from hact.features import N_HANDCRAFTED
from hact.graph_build import (
    EntityGraph,
    FeatureSpec,
    FeatureStats,
    HactGraph,
    assemble_hact,
    build_assignment,
    build_cell_topology,
    build_tissue_topology,
    canonical_edges,
    region_feature_average,
    spatial_features,
    strip_morphology,
)
from hact.synthetic import render_he_image


def _edge_set(e):
    return {tuple(map(int, row)) for row in e}


def _halves(h=10, w=10):
    labels = np.zeros((h, w), np.int64)
    labels[:, w // 2 :] = 1
    return SuperpixelMap(labels)


# ------------------------------------------------------------------- kNN


def test_knn_far_point_is_isolated():
    e = build_cell_topology([[0, 0], [10, 0], [1000, 0]], k=2, d_min=50)
    assert _edge_set(e) == {(0, 1)}


def test_knn_k_larger_than_graph():
    assert _edge_set(build_cell_topology([[0, 0], [10, 0]], k=5, d_min=50)) == {(0, 1)}


def test_knn_single_node_has_no_edges():
    assert build_cell_topology([[3, 3]]).shape == (0, 2)


def test_knn_threshold_is_strict():
    assert build_cell_topology([[0, 0], [50, 0]], k=1, d_min=50).shape == (0, 2)


def test_knn_ties_broken_by_id():
    # node 0 has equidistant neighbors 1 and 2; with k=1 only node 1 is picked from 0
    e = build_cell_topology([[0, 0], [10, 0], [-10, 0]], k=1, d_min=50)
    assert _edge_set(e) == {(0, 1), (0, 2)}  # (0,2) arrives from node 2's side


def test_knn_bad_arguments():
    with pytest.raises(ValueError):
        build_cell_topology([[0, 0], [1, 1]], k=0)


@settings(max_examples=100)
@given(
    arrays(np.int64, st.tuples(st.integers(0, 30), st.just(2)), elements=st.integers(0, 60)),
    st.integers(1, 7),
    st.floats(1.0, 80.0),
)
def test_knn_matches_brute_force_oracle(points, k, d_min):
    got = _edge_set(build_cell_topology(points.astype(float), k, d_min))
    assert got == knn_edges(points.tolist(), k, d_min)


# ------------------------------------------------------------------- RAG


def test_rag_two_halves():
    assert _edge_set(build_tissue_topology(_halves())) == {(0, 1)}


def test_rag_single_region():
    assert build_tissue_topology(SuperpixelMap(np.zeros((4, 4), np.int64))).shape == (0, 2)


def test_rag_diagonal_touch_is_not_adjacent():
    labels = np.array([[0, 1], [1, 2]])
    # 0 and 2 only touch at a corner
    assert _edge_set(build_tissue_topology(SuperpixelMap(labels))) == {(0, 1), (1, 2)}


@settings(max_examples=100)
@given(arrays(np.int64, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=st.integers(0, 5)))
def test_rag_matches_pixel_scan_oracle(raw):
    _, labels = np.unique(raw, return_inverse=True)
    labels = labels.reshape(raw.shape)
    assert _edge_set(build_tissue_topology(SuperpixelMap(labels))) == rag_edges(labels.tolist())


# ------------------------------------------------------------------- features and assignment


def test_spatial_feature_examples():
    np.testing.assert_allclose(spatial_features((50, 25), (100, 100)), [0.5, 0.25])
    np.testing.assert_allclose(spatial_features((0, 0), (7, 9)), [0.0, 0.0])


def test_region_feature_average():
    feats = np.array([[1.0, 2.0], [3.0, 4.0], [10.0, 0.0]])
    np.testing.assert_allclose(region_feature_average(feats, [[0, 1], [2]]), [[2.0, 3.0], [10.0, 0.0]])
    with pytest.raises(ValueError):
        region_feature_average(feats, [[0], []])


def test_assignment_uses_majority_overlap():
    spmap = _halves()
    inst = np.zeros((10, 10), np.int64)
    inst[2:7, 1:6] = 1  # four columns in region 0, one in region 1
    nuclei = NucleiSet(np.array([[4.9, 4.0]]), inst)
    np.testing.assert_array_equal(build_assignment(nuclei, spmap), [[1, 0]])


def test_assignment_without_masks_uses_centroid():
    a = build_assignment(NucleiSet(np.array([[1.0, 1.0], [8.0, 3.0]])), _halves())
    np.testing.assert_array_equal(a, [[1, 0], [0, 1]])


@given(arrays(np.float64, st.tuples(st.integers(0, 20), st.just(2)), elements=st.floats(0, 9.99)))
def test_assignment_rows_are_one_hot(centroids):
    a = build_assignment(NucleiSet(centroids), _halves())
    assert a.shape == (len(centroids), 2)
    assert np.all(a.sum(axis=1) == 1)


def test_canonical_edges_drop_loops_and_duplicates():
    np.testing.assert_array_equal(canonical_edges([[2, 1], [1, 2], [3, 3], [0, 4]]), [[0, 4], [1, 2]])


# ------------------------------------------------------------------- assembly


def _blank(h=20, w=20):
    return np.full((h, w, 3), 230, np.uint8)


def test_assemble_without_morphology_keeps_spatial_only():
    g = assemble_hact(_blank(), NucleiSet(np.array([[3.0, 3.0], [15.0, 4.0]])), _halves(20, 20))
    assert g.cell_graph.feature_dim == 2 and g.tissue_graph.feature_dim == 2
    np.testing.assert_allclose(g.cell_graph.features, [[0.15, 0.15], [0.75, 0.2]])
    np.testing.assert_array_equal(g.assignment, [[1, 0], [0, 1]])


def test_assemble_with_zero_nuclei():
    g = assemble_hact(_blank(), NucleiSet(np.zeros((0, 2))), SuperpixelMap(np.zeros((20, 20), np.int64)))
    assert g.cell_graph.node_count == 0
    assert g.tissue_graph.node_count == 1
    assert g.assignment.shape == (0, 1)


def test_assemble_handcrafted_dims(rng):
    sample = render_he_image(rng)
    spmap = sample.regions
    g = assemble_hact(sample.image, sample.nuclei, spmap, FeatureSpec("handcrafted"))
    assert g.cell_graph.feature_dim == N_HANDCRAFTED + 2
    assert g.tissue_graph.feature_dim == N_HANDCRAFTED + 2
    assert np.all(np.isfinite(g.cell_graph.features))


def test_external_features_row_mismatch(tmp_path):
    path = tmp_path / "cells.csv"
    path.write_text("1,2\n3,4\n5,6\n")
    spec = FeatureSpec("external", external_cell=str(path))
    with pytest.raises(ValueError, match="3 rows, expected 2"):
        assemble_hact(_blank(), NucleiSet(np.array([[3.0, 3.0], [15.0, 4.0]])), _halves(20, 20), spec)


def test_external_features_are_prepended(tmp_path):
    cells, tissue = tmp_path / "c.csv", tmp_path / "t.csv"
    cells.write_text("1,2\n3,4\n")
    tissue.write_text("7\n9\n")
    spec = FeatureSpec("external", external_cell=str(cells), external_tissue=str(tissue))
    g = assemble_hact(_blank(), NucleiSet(np.array([[3.0, 3.0], [15.0, 4.0]])), _halves(20, 20), spec)
    np.testing.assert_allclose(g.cell_graph.features[:, :2], [[1, 2], [3, 4]])
    np.testing.assert_allclose(g.tissue_graph.features[:, 0], [7, 9])


def test_feature_spec_validation():
    with pytest.raises(ValueError):
        FeatureSpec("external")
    with pytest.raises(ValueError):
        FeatureSpec("none", external_cell="x.csv")
    with pytest.raises(ValueError):
        FeatureSpec("deep")


def test_json_round_trip(tmp_path, rng):
    sample = render_he_image(rng)
    g = assemble_hact(sample.image, sample.nuclei, sample.regions, FeatureSpec("handcrafted"))
    path = tmp_path / "g.json"
    g.save(path)
    assert HactGraph.load(path) == g


def test_feature_stats_and_strip(rng):
    cell = EntityGraph([[0, 1]], rng.normal(3, 2, (2, 4)), [[0, 0], [1, 1]])
    tissue = EntityGraph([], rng.normal(size=(1, 4)), [[0, 0]], "tissue")
    g = HactGraph(cell, tissue, [[1], [1]])
    z = FeatureStats.fit([g]).apply(g)
    np.testing.assert_allclose(z.cell_graph.features.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_array_equal(z.tissue_graph.features, 0.0)  # constant column keeps std 1
    s = strip_morphology(g)
    np.testing.assert_array_equal(s.cell_graph.features, g.cell_graph.features[:, -2:])
