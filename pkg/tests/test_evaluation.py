import json
import math

import numpy as np
import pytest

from multiscale_va import data as D
from multiscale_va import evaluation as E
from multiscale_va import model as M
from multiscale_va.errors import InputError

SEQ, HOP = 256, 256


def constant(value):
    return lambda samples: np.full((len(samples), 2), value)


def perfect(samples):
    return np.array([s.target for s in samples])


def test_rmse_examples():
    assert E.rmse([5.0, 5.0], [5.0, 5.0]) == 0.0
    assert E.rmse([6.0, 4.0], [5.0, 5.0]) == 1.0
    assert E.rmse([1.0, 2.0, 3.0], [1.0, 2.0, 7.0]) == pytest.approx(math.sqrt(16 / 3), abs=1e-15)
    with pytest.raises(InputError):
        E.rmse([], [])
    with pytest.raises(InputError):
        E.rmse([1.0], [1.0, 2.0])


def test_rmse_is_root_of_per_dimension_mse():
    rng = np.random.default_rng(0)
    p, t = rng.uniform(0.5, 9.5, (50, 2)), rng.uniform(0.5, 9.5, (50, 2))
    for col in (0, 1):
        assert E.rmse(p[:, col], t[:, col]) == pytest.approx(math.sqrt(np.mean((p[:, col] - t[:, col]) ** 2)),
                                                            abs=1e-15)


@pytest.mark.parametrize("scenario", D.SCENARIOS)
def test_perfect_predictor_scores_zero(small_trials, scenario):
    res = E.evaluate_scenario(None, small_trials, scenario, hop=HOP, seq_len=SEQ, predictor=perfect)
    assert res.folds and all(f.arousal_rmse == 0.0 and f.valence_rmse == 0.0 for f in res.folds)
    assert res.mean("arousal") == 0.0 and res.std("valence") == 0.0


def test_constant_predictor_matches_brute_force_elicitor(small_trials):
    res = E.evaluate_scenario(None, small_trials, "across_elicitor", hop=HOP, seq_len=SEQ, predictor=constant(5.0))
    assert [f.fold for f in res.folds] == ["fold0", "fold1", "fold2", "fold3"]
    per_fold = {"arousal": [], "valence": []}
    for k, quadrant in enumerate(D.QUADRANTS):
        targets = np.array([s.target for t in small_trials if t.quadrant == quadrant
                            for s in D.make_windows(t, SEQ, HOP)])
        v = math.sqrt(np.mean((targets[:, 0] - 5.0) ** 2))
        a = math.sqrt(np.mean((targets[:, 1] - 5.0) ** 2))
        assert res.folds[k].valence_rmse == pytest.approx(v, abs=1e-12)
        assert res.folds[k].arousal_rmse == pytest.approx(a, abs=1e-12)
        assert res.folds[k].n_windows == len(targets)
        per_fold["arousal"].append(a)
        per_fold["valence"].append(v)
    for dim, vals in per_fold.items():
        mean = sum(vals) / len(vals)
        assert res.mean(dim) == pytest.approx(mean, abs=1e-12)
        assert res.std(dim) == pytest.approx(math.sqrt(sum((x - mean) ** 2 for x in vals) / len(vals)), abs=1e-12)


def test_across_time_scores_each_test_trial(small_trials):
    res = E.evaluate_scenario(None, small_trials, "across_time", hop=128, seq_len=SEQ, predictor=constant(5.0))
    assert len(res.folds) == len(small_trials)
    t = small_trials[3]
    _, test_refs = D.across_time_refs(t, SEQ, 128)
    targets = np.array([s.target for s in D.make_windows(t, SEQ, 128, [r[2] for r in test_refs])])
    fold = next(f for f in res.folds if f.fold == f"sub{t.subject_id}_vid{t.video_id}")
    assert fold.arousal_rmse == pytest.approx(math.sqrt(np.mean((targets[:, 1] - 5) ** 2)), abs=1e-12)


def test_model_path_uses_clamped_predictions(small_trials):
    cfg = M.ModelConfig.preset("tiny")
    params = M.init_params(cfg)
    trials = [t for t in small_trials if t.subject_id == 1][:4] + [t for t in small_trials if t.subject_id == 2][:4]
    res = E.evaluate_scenario(params, trials, "across_subject", hop=512)
    assert len(res.folds) == 2
    ref = E.evaluate_scenario(None, trials, "across_subject", hop=512, seq_len=cfg.seq_len,
                              predictor=lambda s: M.predict([x.window for x in s], params))
    assert [f.arousal_rmse for f in res.folds] == [f.arousal_rmse for f in ref.folds]


def test_fit_hook_trains_per_fold(small_trials):
    calls = []

    def fit(samples, label):
        calls.append((label, len(samples)))
        return M.init_params(M.ModelConfig.preset("tiny"))

    E.evaluate_scenario(None, small_trials, "across_version", hop=1024, seq_len=32, fit=fit)
    assert [c[0] for c in calls] == ["fold0", "fold1"] and all(n > 0 for _, n in calls)


def test_empty_folds_are_flagged():
    # only HVHA videos: three elicitor folds have nothing to test
    trials = [D.synth_trial(0, s, 1, "HVHA", 1.0) for s in (1, 2)] + [D.synth_trial(0, 1, 2, "LVLA", 1.0)]
    res = E.evaluate_scenario(None, trials, "across_elicitor", hop=SEQ, seq_len=SEQ, predictor=constant(5.0))
    assert [f.fold for f in res.folds] == ["fold0", "fold3"]
    assert {f["fold"] for f in res.flagged} == {"fold1", "fold2"}
    short = [D.synth_trial(0, 1, v, q, 0.1) for v, q in ((1, "HVHA"), (2, "HVLA"))]
    res = E.evaluate_scenario(None, short, "across_elicitor", hop=SEQ, seq_len=SEQ, predictor=constant(5.0))
    assert not res.folds and res.mean("arousal") is None
    assert any("shorter" in f["reason"] for f in res.flagged)


def test_requires_model_or_predictor(small_trials):
    with pytest.raises(InputError):
        E.evaluate_scenario(None, small_trials, "across_time")
    with pytest.raises(InputError):
        E.evaluate_scenario(None, small_trials, "across_time", seq_len=SEQ)


def _report(small_trials):
    return E.evaluate(None, small_trials, hop=HOP, seq_len=SEQ, predictor=constant(4.0))


def test_overall_is_mean_of_row_means(small_trials):
    rep = _report(small_trials)
    vals = [rep.rows[s].mean(d) for s in D.SCENARIOS for d in ("arousal", "valence")]
    assert rep.overall_rmse == pytest.approx(sum(vals) / 8, abs=1e-15)


def test_report_round_trip(tmp_path, small_trials):
    rep = _report(small_trials)
    path = rep.save(tmp_path / "r.json")
    again = E.EvalReport.load(path)
    assert again.to_dict() == rep.to_dict()
    assert again.to_table() == rep.to_table()
    doc = json.loads(path.read_text())
    assert doc["overall_label"] == "mean scenario RMSE" and "population" in doc["std_definition"]
    assert {(e["scenario"], e["dimension"]) for e in doc["entries"]} == {
        (s, d) for s in D.SCENARIOS for d in ("arousal", "valence")}


def test_table_layout(small_trials):
    table = _report(small_trials).to_table().splitlines()
    assert table[0].startswith("# STD:")
    assert table[1].split() == ["Scenarios", "type", "Arousal", "RMSE", "Arousal", "STD",
                                "Valence", "RMSE", "Valence", "STD"]
    assert [line.split(" scenario")[0] for line in table[3:7]] == [
        "Across-time", "Across-subject", "Across-elicitor", "Across-version"]
    assert table[-1].startswith("mean scenario RMSE: ")


def test_csv_matches_report(small_trials):
    rep = _report(small_trials)
    lines = rep.to_csv().splitlines()
    assert lines[0].startswith("scenario,arousal_rmse")
    cells = lines[3].split(",")
    assert cells[0] == "across_elicitor"
    assert float(cells[1]) == rep.rows["across_elicitor"].mean("arousal")
    assert int(cells[5]) == 4


def test_load_rejects_other_documents(tmp_path):
    (tmp_path / "x.json").write_text('{"format": "other"}')
    with pytest.raises(InputError):
        E.EvalReport.load(tmp_path / "x.json")
    with pytest.raises(InputError):
        E.EvalReport.load(tmp_path / "missing.json")
