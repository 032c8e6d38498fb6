import numpy as np
import pytest

import lrcl.adapters as adapters
import lrcl.data as data
from lrcl.errors import AdapterError, ConfigError
from lrcl.tensor_core import Rng


def make_mmfit_tree(root, workouts, duration_s=10.0, segments=None):
    """Fake MM-Fit layout: npy tables [time_s, meta, x, y, z] per wrist."""
    rng = Rng(99)
    for wid in workouts:
        d = root / wid
        d.mkdir(parents=True)
        n = int(duration_s * 100) + 1
        times = np.arange(n) / 100.0
        for side in ("l", "r"):
            table = np.column_stack(
                [times, np.zeros(n), *(rng.normal(size=(3, n)))]
            )
            np.save(d / f"{wid}_sw_{side}_acc.npy", table)
        rows = segments.get(wid, []) if segments else []
        text = "\n".join(f"{s},{e},{reps},{name}" for s, e, reps, name in rows)
        (d / f"{wid}_labels.csv").write_text(text + ("\n" if text else ""))


@pytest.fixture
def mmfit_root(tmp_path):
    make_mmfit_tree(
        tmp_path,
        ["w01", "w14"],
        segments={"w01": [(2.0, 6.0, 10, "squats")]},  # w14 stays all-rest
    )
    return tmp_path


def mmfit_config(root, workouts):
    return adapters.MMFitAdapterConfig(
        root=str(root),
        workouts=workouts,
    )


class TestMMFit:
    def test_split_roles_and_labels(self, mmfit_root):
        cfg = mmfit_config(
            mmfit_root,
            [{"id": "w01", "subject": 1}, {"id": "w14", "subject": 14}],
        )
        splits = adapters.adapt_mmfit(cfg)
        assert set(splits) == {"train", "validation"}
        train, val = splits["train"], splits["validation"]
        assert all(p.subject == 1 for p in train.pairs)
        assert all(p.subject == 14 for p in val.pairs)
        assert train.window_len == 200
        # 10 s stream -> 9 windows of 2 s at 1 s step
        assert len(train) == 9
        # squats fills [2, 6]: windows fully inside are labeled squats (id 1)
        squats = adapters.MMFIT_CLASSES.index("squats")
        by_t0 = {p.t0: p.label for p in train.pairs}
        assert by_t0[200] == squats and by_t0[300] == squats
        assert by_t0[0] == 0

    def test_rest_only_workout_is_all_null(self, mmfit_root):
        cfg = mmfit_config(mmfit_root, [{"id": "w14", "subject": 14}])
        splits = adapters.adapt_mmfit(cfg)
        assert all(p.label == 0 for p in splits["validation"].pairs)

    def test_subjects_never_cross_roles(self, mmfit_root):
        cfg = mmfit_config(
            mmfit_root,
            [{"id": "w01", "subject": 1}, {"id": "w14", "subject": 14}],
        )
        splits = adapters.adapt_mmfit(cfg)
        seen = {}
        for role, ds in splits.items():
            for s in ds.subjects().tolist():
                assert s not in seen, f"subject {s} in {seen.get(s)} and {role}"
                seen[s] = role

    def test_missing_stream_reports_workout(self, mmfit_root):
        (mmfit_root / "w01" / "w01_sw_r_acc.npy").unlink()
        cfg = mmfit_config(mmfit_root, [{"id": "w01", "subject": 1}])
        with pytest.raises(AdapterError, match="w01"):
            adapters.adapt_mmfit(cfg)

    def test_published_split_constant(self):
        roles = adapters.MMFIT_SPLITS.roles
        assert roles["train"] == [1, 2, 3, 4, 6, 7, 8, 16, 17, 18]
        assert roles["validation"] == [14, 15, 19]
        assert roles["test"] == [9, 10, 11]
        assert roles["unseen_test"] == [0, 5, 12, 13, 20]

    def test_reingest_byte_identical(self, mmfit_root, tmp_path):
        cfg = mmfit_config(mmfit_root, [{"id": "w01", "subject": 1}])
        out1, out2 = tmp_path / "a.lrw", tmp_path / "b.lrw"
        data.write_canonical(adapters.adapt_mmfit(cfg)["train"], out1)
        data.write_canonical(adapters.adapt_mmfit(cfg)["train"], out2)
        assert out1.read_bytes() == out2.read_bytes()


def make_opportunity_file(path, n=300, null_span=(100, 180), seed=5):
    """Fake session: [time_ms, lla xyz, rla xyz, label] with NaN holes."""
    rng = Rng(seed)
    time_ms = np.arange(n) * (1000.0 / 30.0)
    sensors = rng.normal(size=(6, n))
    sensors[0, 10:14] = np.nan  # interpolated hole
    sensors[3, 0:2] = np.nan  # held leading edge
    labels = np.full(n, 1.0)  # stand
    labels[n // 2 :] = 4.0  # sit
    labels[null_span[0] : null_span[1]] = 0.0  # null region
    table = np.column_stack([time_ms, *sensors, labels])
    lines = []
    for row in table:
        lines.append(" ".join("NaN" if np.isnan(v) else f"{v:.6f}" for v in row))
    path.write_text("\n".join(lines) + "\n")


@pytest.fixture
def opportunity_root(tmp_path):
    make_opportunity_file(tmp_path / "S1-ADL1.dat", seed=5)
    make_opportunity_file(tmp_path / "S2-ADL4.dat", seed=6)
    return tmp_path


def opportunity_config(root, **overrides):
    base = dict(
        root=str(root),
        lla_columns=(1, 2, 3),
        rla_columns=(4, 5, 6),
        label_column=7,
        train_sessions=["S1-ADL1"],
        test_sessions=["S2-ADL4"],
    )
    base.update(overrides)
    return adapters.OpportunityAdapterConfig(**base)


class TestOpportunity:
    def test_classes_and_windows(self, opportunity_root):
        splits = adapters.adapt_opportunity(opportunity_config(opportunity_root))
        train = splits["train"]
        assert train.class_names == ["stand", "walk", "sit", "lie"]
        assert train.n_classes == 4
        assert train.window_len == 60
        assert all(p.label in (0, 2) for p in train.pairs)  # stand / sit
        assert not any(np.isnan(p.left).any() for p in train.pairs)
        assert not any(np.isnan(p.right).any() for p in train.pairs)

    def test_null_majority_windows_dropped(self, opportunity_root):
        splits = adapters.adapt_opportunity(opportunity_config(opportunity_root))
        # 300-sample stream -> 9 windows; the 80-sample null region removes
        # the windows whose majority falls inside it.
        train = splits["train"]
        assert len(train) < 9
        assert "dropped_null=" in train.provenance

    def test_test_sessions_constant(self):
        assert adapters.OPPORTUNITY_TEST_SESSIONS == [
            "S2-ADL4", "S2-ADL5", "S3-ADL4", "S3-ADL5"
        ]

    def test_subject_parsed_from_session(self, opportunity_root):
        splits = adapters.adapt_opportunity(opportunity_config(opportunity_root))
        assert all(p.subject == 1 for p in splits["train"].pairs)
        assert all(p.subject == 2 for p in splits["test"].pairs)

    def test_missing_session_file(self, opportunity_root):
        cfg = opportunity_config(opportunity_root, train_sessions=["S1-ADL2"])
        with pytest.raises(AdapterError, match="S1-ADL2"):
            adapters.adapt_opportunity(cfg)

    def test_bad_column_rejected(self, opportunity_root):
        cfg = opportunity_config(opportunity_root, label_column=99)
        with pytest.raises(ConfigError, match="99"):
            adapters.adapt_opportunity(cfg)

    def test_config_from_json_requires_columns(self):
        with pytest.raises(ConfigError):
            adapters.opportunity_config_from_json({"root": "/nowhere"})

    def test_reingest_byte_identical(self, opportunity_root, tmp_path):
        cfg = opportunity_config(opportunity_root)
        a, b = tmp_path / "a.lrw", tmp_path / "b.lrw"
        data.write_canonical(adapters.adapt_opportunity(cfg)["train"], a)
        data.write_canonical(adapters.adapt_opportunity(cfg)["train"], b)
        assert a.read_bytes() == b.read_bytes()


class TestInterpolation:
    def test_interior_linear(self):
        col = np.array([0.0, np.nan, np.nan, 3.0])
        out = adapters._interpolate_nans(col)
        assert np.allclose(out, [0.0, 1.0, 2.0, 3.0])

    def test_edges_held(self):
        col = np.array([np.nan, 2.0, 5.0, np.nan])
        out = adapters._interpolate_nans(col)
        assert np.allclose(out, [2.0, 2.0, 5.0, 5.0])

    def test_all_nan_rejected(self):
        with pytest.raises(AdapterError):
            adapters._interpolate_nans(np.array([np.nan, np.nan]))
