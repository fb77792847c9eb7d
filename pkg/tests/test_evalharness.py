import json

import pytest

from prefalign.config import config_from_dict
from prefalign.evalharness import (
    REFERENCE_ROWS,
    CellOutcome,
    EvalResult,
    SampleRecord,
    cell_name,
    emit_report,
    evaluate,
    explanation_of,
    extract_answer,
    run_ablation,
    summarize,
)
from prefalign.model import ModelConfig, PolicyModel
from prefalign.numerics import RngState
from prefalign.sft import InputSetting
from prefalign.taskgen import generate_dataset, task_vocab


@pytest.fixture(scope="module")
def vocab():
    return task_vocab()


@pytest.mark.parametrize(
    "text,letter",
    [
        ("Answer: C. because", "C"),
        ("answer:b", "B"),
        ("junk then Answer:  D.", "D"),
        ("Answer: A. then Answer: B.", "A"),
        ("no marker here", None),
        ("Answer: E.", None),
        ("Answer: Apple", None),
        ("", None),
    ],
)
def test_extract_answer(text, letter):
    assert extract_answer(text) == letter


def test_explanation_of():
    assert explanation_of("Answer: B. F = 3 N") == "F = 3 N"
    assert explanation_of("free text") == "free text"


def _result(preds, golds):
    return EvalResult(
        InputSetting.TEXT_IMAGE, False, [SampleRecord(str(i), p, g) for i, (p, g) in enumerate(zip(preds, golds))]
    )


def test_accounting_invariant():
    r = _result(["A", None, "B", "C"], ["A", "A", "C", "C"])
    assert r.n_correct == 2 and r.n_parse_fail == 1
    assert r.n_correct + (r.n_total - r.n_correct - r.n_parse_fail) + r.n_parse_fail == r.n_total
    assert r.accuracy == 0.5 and r.parse_fail_rate == 0.25


def test_result_roundtrip_checks_counts():
    r = _result(["A", "B"], ["A", "A"])
    d = r.to_dict()
    assert EvalResult.from_dict(d).accuracy == 0.5
    d["n_correct"] = 2
    with pytest.raises(ValueError, match="n_correct"):
        EvalResult.from_dict(d)


def test_random_model_near_chance(vocab):
    m = PolicyModel(ModelConfig(vocab_size=len(vocab)), RngState(0))
    res = evaluate(m, vocab, generate_dataset(3, 240), "TEXT_IMAGE_CAPTION", max_new_tokens=3)
    assert 0.10 <= res.accuracy <= 0.45
    assert res.n_parse_fail == 0
    assert all(r.response.startswith("Answer: ") for r in res.records)


def test_unconstrained_eval_counts_parse_failures(vocab):
    m = PolicyModel(ModelConfig(vocab_size=len(vocab)), RngState(1))
    res = evaluate(m, vocab, generate_dataset(3, 40), "TEXT_CAPTION", constrained=False, max_new_tokens=3)
    assert res.n_total == 40
    assert res.n_correct + res.n_parse_fail <= 40


def test_cell_name():
    assert cell_name(InputSetting.TEXT_IMAGE_CAPTION, False, 0) == "TIC-sft-s0"
    assert cell_name("TEXT_CAPTION", True, 2) == "TC-aligned-s2"


def _outcomes():
    out = []
    for seed in (0, 1):
        for i, s in enumerate(("TEXT_IMAGE", "TEXT_CAPTION", "TEXT_IMAGE_CAPTION")):
            recs = [SampleRecord(str(j), "A" if j <= i + seed else "B", "A") for j in range(4)]
            out.append(CellOutcome(s, False, seed, EvalResult(InputSetting(s), False, recs, seed)))
    out.append(CellOutcome("TEXT_IMAGE", True, 0, None, "RuntimeError: boom"))
    return out


def test_summary_means_and_failures():
    rows = summarize(_outcomes())
    ti = next(r for r in rows if r["setting"] == "TEXT_IMAGE" and not r["aligned"])
    assert ti["accuracy"] == pytest.approx((1 / 4 + 2 / 4) / 2)
    bad = next(r for r in rows if r["aligned"])
    assert bad["accuracy"] is None and bad["failed_seeds"] == [0]


def test_report_files(tmp_path):
    j, t = emit_report(_outcomes(), tmp_path)
    doc = json.loads(j.read_text())
    assert set(doc) == {"cells", "summary", "references"}
    assert len(doc["cells"]) == 7
    assert {"setting", "aligned", "seed", "accuracy", "parse_fail_rate", "n"} <= set(doc["cells"][0])
    assert any(c["status"] == "failed" for c in doc["cells"])
    assert doc["references"] == list(REFERENCE_ROWS)
    text = t.read_text()
    assert "SFT only" in text and "failed" in text and "53.30%" in text
    j2, _ = emit_report(list(reversed(_outcomes())), tmp_path / "again")
    assert j2.read_bytes() == j.read_bytes()


def test_reference_rows_present():
    accs = {(r["setting"], r["model"]): r["accuracy"] for r in REFERENCE_ROWS}
    assert any(abs(a - 0.533) < 1e-9 for a in accs.values())
    assert any(abs(a - 0.8252) < 1e-9 for a in accs.values())


def test_emit_report_empty(tmp_path):
    with pytest.raises(ValueError):
        emit_report([], tmp_path)


def tiny_grid_config(**eval_kw):
    return config_from_dict(
        {
            "model": {"n_layers": 1, "d_model": 16, "n_heads": 2, "d_ff": 32},
            "sft": {"batch_size": 8},
            "dpo": {"epochs": 1, "batch_size": 4},
            "eval": {"seeds": [0], "max_new_tokens": 3, **eval_kw},
            "ablation": {"sft_epochs": 1, "pref_prompts": 4, "k": 2},
        }
    )


def test_run_ablation_grid_and_cache(tmp_path, vocab):
    ds = generate_dataset(0, 24)
    train, test = ds[:16], ds[16:]
    cfg = tiny_grid_config()
    out = run_ablation(train, test, vocab, cfg, tmp_path)
    assert len(out) == 6
    assert all(o.result is not None for o in out), [o.error for o in out]
    assert {(o.setting, o.aligned) for o in out} == {
        (s, a) for s in ("TEXT_IMAGE", "TEXT_CAPTION", "TEXT_IMAGE_CAPTION") for a in (False, True)
    }
    assert sorted(p.name for p in tmp_path.iterdir()) == sorted(
        cell_name(s, a, 0) for s in ("TEXT_IMAGE", "TEXT_CAPTION", "TEXT_IMAGE_CAPTION") for a in (False, True)
    )
    again = run_ablation(train, test, vocab, cfg, tmp_path)
    assert [o.result.to_dict() for o in again] == [o.result.to_dict() for o in out]


def test_run_ablation_records_failed_cell(tmp_path, vocab, monkeypatch):
    ds = generate_dataset(1, 20)

    def boom(*a, **k):
        raise RuntimeError("simulated failure")

    monkeypatch.setattr("prefalign.evalharness._align_cell", boom)
    cfg = tiny_grid_config(settings=["TEXT_CAPTION"])
    out = run_ablation(ds[:14], ds[14:], vocab, cfg, tmp_path)
    assert [o.aligned for o in out] == [False, True]
    assert out[0].result is not None
    assert out[1].result is None and "simulated failure" in out[1].error
    assert (tmp_path / "TC-aligned-s0" / "error.txt").exists()
