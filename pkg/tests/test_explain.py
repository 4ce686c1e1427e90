"""Prompt templates, endpoint clients, grading, and the finetune builder."""

import json

import numpy as np
import pytest

from compcf import explain as ex
from compcf.errors import ConfigError, DataError, DisjointnessError, EndpointError
from compcf.perturb import CAUSES, CorpusEntry, LowCompetencyCorpus


def _entry(cause, source_id, params=None, seed=0):
    rng = np.random.default_rng(hash((cause, source_id)) % 2**32 + seed)
    img = rng.random((32, 32, 3)).astype(np.float32)
    return CorpusEntry(image=img, cause=cause, source_id=source_id,
                       params=params or {}, score=0.1)


def _corpus(per_cause=2, seed=0):
    params = {"brightness": {"factor": 1.8}, "contrast": {"factor": 0.4},
              "saturation": {"factor": 2.2}, "noise": {"magnitude": 0.3, "seed": 9},
              "pixelation": {"block_size": 4}, "spatial": {"heldout_class": "stripes"}}
    entries = [_entry(c, f"s{k}", params[c], seed)
               for c in CAUSES for k in range(per_cause)]
    return LowCompetencyCorpus(entries=entries, threshold=0.7, seed=seed, skipped={})


def test_templates_load_and_compose():
    t = ex.load_templates()
    assert set(t.dataset_contexts) == {"lunar", "speed", "shapes"}
    for text in (*t.dataset_contexts.values(), t.estimator_context,
                 t.query_without_counterfactual, t.query_with_counterfactual):
        assert text and not text.endswith("\n")
    ctx = ex.build_context(t, "shapes")
    assert ctx == t.dataset_contexts["shapes"] + "\n\n" + t.estimator_context


def test_build_context_rejects_unknown_dataset():
    with pytest.raises(ConfigError):
        ex.build_context(ex.load_templates(), "medical")


def test_cause_templates_self_grade():
    for (cause, _direction), sentence in ex.CAUSE_TEMPLATES.items():
        graded, correct = ex.grade_explanation(sentence, cause, ex.DEFAULT_RUBRIC)
        assert graded == cause and correct


def test_grading_multi_family_needs_template_sentence():
    text = "The image is noisy and also quite dark."
    graded, correct = ex.grade_explanation(text, "noise", ex.DEFAULT_RUBRIC)
    assert graded is None and not correct
    text = "The original image contains too much noise. It also looks dark."
    graded, correct = ex.grade_explanation(text, "noise", ex.DEFAULT_RUBRIC)
    assert graded == "noise" and correct


def test_grading_rejects_empty_text():
    with pytest.raises(DataError):
        ex.grade_explanation("   ", "noise", ex.DEFAULT_RUBRIC)


def test_grading_no_family_hit():
    graded, correct = ex.grade_explanation("A lovely photo.", "noise",
                                           ex.DEFAULT_RUBRIC)
    assert graded is None and not correct


def test_compose_side_by_side_left_half_bitwise():
    rng = np.random.default_rng(3)
    orig = rng.random((32, 32, 3)).astype(np.float32)
    cf_img = rng.random((32, 32, 3)).astype(np.float32)
    combo = ex.compose_side_by_side(orig, cf_img)
    assert combo.shape == (32, 64, 3)
    assert np.array_equal(combo[:, :32], orig)


def test_compose_resizes_mismatched_counterfactual():
    rng = np.random.default_rng(4)
    orig = rng.random((32, 32, 3)).astype(np.float32)
    cf_img = rng.random((16, 16, 3)).astype(np.float32)
    combo = ex.compose_side_by_side(orig, cf_img)
    assert combo.shape[0] == 32
    assert np.array_equal(combo[:, :32], orig)


def test_retry_backoff_then_success():
    naps = []
    client = ex.FlakyStub(failures=2, inner=ex.StaticStub("Too much noise."))
    text, info = ex.request_explanation(client, "ctx", "q", [np.zeros((4, 4, 3))],
                                        meta=None, sleep=naps.append)
    assert text == "Too much noise."
    assert info["attempts"] == 3
    assert naps == [0.5, 1.0]


def test_retry_exhaustion_raises():
    naps = []
    client = ex.FlakyStub(failures=5, inner=ex.StaticStub("x"))
    with pytest.raises(EndpointError):
        ex.request_explanation(client, "ctx", "q", [np.zeros((4, 4, 3))],
                               meta=None, sleep=naps.append)
    assert naps == [0.5, 1.0]


def test_recording_stub_captures_call():
    inner = ex.StaticStub("The image is too pixelated.")
    rec = ex.RecordingStub(inner)
    text, _ = ex.request_explanation(rec, "CTX", "QUERY", [np.ones((4, 4, 3))],
                                     meta={"true_cause": "pixelation"},
                                     sleep=lambda s: None)
    assert text == "The image is too pixelated."
    assert rec.calls[0]["context"] == "CTX"
    assert rec.calls[0]["query"] == "QUERY"
    assert rec.calls[0]["meta"]["true_cause"] == "pixelation"


def test_oracle_experiment_is_perfect_without_models():
    corpus = _corpus(per_cause=2)
    grid = ex.run_explanation_experiment(corpus, ["None"], est=None,
                                         client=ex.OracleStub())
    assert grid.accuracies["None"] == {c: 1.0 for c in CAUSES}
    assert grid.coverage["None"] == {"completed": 12, "attempted": 12}


def test_static_stub_forces_single_row():
    corpus = _corpus(per_cause=2)
    grid = ex.run_explanation_experiment(
        corpus, ["None"], est=None, client=ex.StaticStub("The image is too dark."))
    expected = {c: (1.0 if c == "brightness" else 0.0) for c in CAUSES}
    assert grid.accuracies["None"] == expected


def test_experiment_rejects_unknown_method():
    with pytest.raises(ConfigError):
        ex.run_explanation_experiment(_corpus(1), ["IGD"], est=None,
                                      client=ex.OracleStub())


def test_grid_serialization(tmp_path):
    corpus = _corpus(per_cause=1)
    grid = ex.run_explanation_experiment(corpus, ["None"], est=None,
                                         client=ex.OracleStub())
    lines = grid.to_csv().strip().splitlines()
    assert lines[0] == "Method,Spatial,Brightness,Contrast,Saturation,Noise,Pixelation,Average"
    assert lines[1].startswith("None,100.00%,")
    payload = json.loads(grid.to_json())
    assert payload["accuracies"]["None"]["noise"] == 1.0
    ex.write_explanation_grid(grid, tmp_path)
    assert (tmp_path / "explanation_grid.csv").read_text() == grid.to_csv()
    records = [json.loads(l) for l in
               (tmp_path / "explanation_records.jsonl").read_text().splitlines()]
    assert len(records) == len(grid.records) == 6


def test_partial_endpoint_failures_excluded_from_denominator():
    corpus = _corpus(per_cause=1)
    client = ex.FlakyStub(failures=4, inner=ex.OracleStub())
    grid = ex.run_explanation_experiment(corpus, ["None"], est=None, client=client)
    completed = grid.coverage["None"]["completed"]
    errored = [r for r in grid.records if r.error is not None]
    assert completed == 6 - len(errored)
    assert all(r.raw_text == "" for r in errored)


def test_finetune_pairs_structure(tmp_path):
    extra = _corpus(per_cause=3, seed=1)
    pairs = ex.build_finetune_dataset(extra)
    assert len(pairs) == 6 * 3
    by_cause = {}
    for p in pairs:
        by_cause.setdefault(p.true_cause, []).append(p)
        assert p.image_file.endswith(".png")
        assert p.query == ex.load_templates().query_without_counterfactual
    sat = by_cause["saturation"][0]
    assert sat.target == "The original image is over-saturated."
    bright = by_cause["brightness"][0]
    assert bright.target == "The original image is too bright."
    path = tmp_path / "ft.jsonl"
    ex.write_finetune_dataset(pairs, path)
    rows = [json.loads(l) for l in path.read_text().splitlines()]
    assert len(rows) == len(pairs)
    assert set(rows[0]) == {"image", "context", "query", "target"}


def test_finetune_disjointness_enforced():
    corpus = _corpus(per_cause=2)
    with pytest.raises(DisjointnessError):
        ex.build_finetune_dataset(corpus, eval_corpus=corpus)
    other = _corpus(per_cause=2)
    other = LowCompetencyCorpus(
        entries=[CorpusEntry(e.image, e.cause, e.source_id + "x", e.params, e.score)
                 for e in other.entries],
        threshold=0.7, seed=0, skipped={})
    assert len(ex.build_finetune_dataset(other, eval_corpus=corpus)) == 12
