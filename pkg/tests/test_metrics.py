import json
import math

import numpy as np
import pytest

from nerfloc.errors import EmptyInput
from nerfloc.metrics import (
    CAMBRIDGE_THRESHOLDS,
    evaluate_records,
    format_table,
    read_records,
    record_errors,
    refinement_curve,
    write_plots,
)


def rec(scene, t, r, localized=True, **kw):
    return dict(scene=scene, t_err=t, r_err=r, localized=localized, **kw)


def test_record_errors_counts_failures_as_misses():
    assert record_errors(rec("s", 0.1, 2.0)) == (0.1, 2.0)
    assert record_errors(rec("s", 0.1, 2.0, localized=False)) == (math.inf, math.inf)
    assert record_errors(rec("s", None, None)) == (math.inf, math.inf)


def test_evaluate_hand_values():
    rows = evaluate_records([rec("a", 0.01, 1.0), rec("a", 0.04, 6.0), rec("a", 0.2, 2.0),
                             rec("b", 0.03, 0.5, localized=False)])
    a, b = rows
    # a: sorted t 0.01, 0.04, 0.2; sorted r 1, 2, 6; only the first passes both thresholds
    assert (a.scene, a.n, a.median_t, a.median_r) == ("a", 3, 0.04, 2.0)
    assert a.recall == pytest.approx(1 / 3)
    assert b.recall == 0.0 and math.isinf(b.median_t)


def test_per_scene_thresholds_and_table():
    rows = evaluate_records([rec("ShopFacade", 0.14, 1.0), rec("KingsCollege", 0.30, 1.0)],
                            per_scene=CAMBRIDGE_THRESHOLDS)
    assert [r.recall for r in rows] == [1.0, 1.0]
    assert [r.t_thresh for r in rows] == [0.15, 0.38]
    text = format_table(rows)
    assert text.splitlines()[-1] == "average 2 0.220000 1.000000 1.000000 - -"
    single = format_table(rows[:1])
    assert "average" not in single


def test_empty_input_raises():
    with pytest.raises(EmptyInput):
        evaluate_records([])


def test_read_records_missing_file(tmp_path):
    assert read_records(tmp_path / "none.jsonl") == []
    p = tmp_path / "r.jsonl"
    p.write_text(json.dumps(rec("s", 0.1, 1.0)) + "\n\n")
    assert read_records(p) == [rec("s", 0.1, 1.0)]


def test_refinement_curve_and_plots(tmp_path):
    recs = [rec("s", 0.1, 1.0, trace={"errors": [[0.3, 3.0], [0.1, 1.0]]}),
            rec("s", 0.2, 2.0, trace={"errors": [[0.5, 5.0], [0.2, 2.0], [0.1, 1.0]]})]
    assert np.allclose(refinement_curve(recs), [[0.4, 4.0], [0.15, 1.5]])
    written = write_plots(recs, tmp_path)
    assert sorted(p.name for p in written) == ["refinement.png", "translation_cdf.png"]
    assert all(p.stat().st_size > 0 for p in written)
