import numpy as np
import pytest

from stabshift import contexts as ctx
from stabshift.errors import ParseError
from stabshift.experiment import run_method, simulate_system, stability_scores, STABILITY
from stabshift.dynamics import label_stable
from stabshift.ingest import batch_protocol, export_trajectory_csv, ingest_trajectory_csv


def write(tmp_path, data, manifest):
    (tmp_path / "d.csv").write_text(data)
    (tmp_path / "m.csv").write_text(manifest)
    return tmp_path / "d.csv", tmp_path / "m.csv"


def small_files(tmp_path, n=3, K=4):
    rng = np.random.default_rng(0)
    trajs = rng.standard_normal((n, K, 2))
    export_trajectory_csv(tmp_path / "d.csv", tmp_path / "m.csv", trajs, [True, False, True][:n],
                          ["train", "train", "test"][:n])
    return trajs


def test_contexts_are_first_step_rows(tmp_path):
    trajs = small_files(tmp_path)
    ds = ingest_trajectory_csv(tmp_path / "d.csv", tmp_path / "m.csv")
    assert ds.contexts.shape == (3, 2)
    np.testing.assert_array_equal(ds.contexts, trajs[:, 0])
    np.testing.assert_array_equal(ds.labels, [True, False, True])
    np.testing.assert_array_equal(ds.split_index("train"), [0, 1])
    # statistics come from the training split only
    np.testing.assert_allclose(ds.mean, trajs[:2].reshape(-1, 2).mean(0))


def test_constant_feature_maps_to_zero(tmp_path):
    trajs = np.zeros((2, 3, 2))
    trajs[..., 1] = np.arange(6).reshape(2, 3)
    trajs[..., 0] = 4.2
    export_trajectory_csv(tmp_path / "d.csv", tmp_path / "m.csv", trajs, [1, 0], ["train", "train"])
    ds = ingest_trajectory_csv(tmp_path / "d.csv", tmp_path / "m.csv")
    assert ds.std[0] == 1e-8
    assert np.all(ds.contexts_std[:, 0] == 0.0)


def test_spring_roundtrip_bit_exact(tmp_path):
    X = ctx.sample_baseline("spring", 40, 3)
    tb = simulate_system("spring", X)
    stable = np.asarray(label_stable(stability_scores("spring", tb), STABILITY["spring"]))
    feats = np.concatenate([np.broadcast_to(X[:, None], (40, tb.grid.n_steps, 2)), tb.states[..., :1]], axis=2)
    splits = ["train"] * 20 + ["holdout"] * 10 + ["test"] * 10
    export_trajectory_csv(tmp_path / "d.csv", tmp_path / "m.csv", feats, stable, splits, times=tb.grid.times)
    ds = ingest_trajectory_csv(tmp_path / "d.csv", tmp_path / "m.csv")
    np.testing.assert_array_equal(ds.contexts[:, :2], X)
    np.testing.assert_array_equal(ds.labels, stable)
    np.testing.assert_array_equal(ds.stacked(), feats)
    np.testing.assert_array_equal(ds.times[0], tb.grid.times)


HEADER = "traj_id,step,t,f1,label\n"
MANIFEST = "traj_id,split\na,train\n"


@pytest.mark.parametrize(
    "body,manifest,row",
    [
        ("a,0,0,1.0,1\na,1,1,2.0\n", MANIFEST, 3),  # ragged
        ("a,0,0,1.0,1\na,1,1,abc,1\n", MANIFEST, 3),  # non-numeric
        ("a,0,0,1.0,1\na,1,1,2.0,2\n", MANIFEST, 3),  # bad label
        ("a,0,0,1.0,1\na,1,1,2.0,0\n", MANIFEST, 3),  # label changes
        ("a,0,0,1.0,1\n", MANIFEST, 2),  # too short
        ("a,0,0,1.0,1\na,0,1,2.0,1\n", MANIFEST, 2),  # duplicate step
    ],
)
def test_parse_errors_carry_rows(tmp_path, body, manifest, row):
    d, m = write(tmp_path, HEADER + body, manifest)
    with pytest.raises(ParseError) as info:
        ingest_trajectory_csv(d, m)
    assert info.value.row == row
    assert str(row) in str(info.value)


def test_header_and_manifest_errors(tmp_path):
    d, m = write(tmp_path, "traj_id,step,t,f1\na,0,0,1\na,1,1,2\n", MANIFEST)
    with pytest.raises(ParseError, match="label"):
        ingest_trajectory_csv(d, m)
    d, m = write(tmp_path, HEADER + "a,0,0,1,1\na,1,1,2,1\n", "traj_id,split\nb,train\n")
    with pytest.raises(ParseError):
        ingest_trajectory_csv(d, m)
    d, m = write(tmp_path, HEADER + "a,0,0,1,1\na,1,1,2,1\n", "traj_id,split\na,validation\n")
    with pytest.raises(ParseError):
        ingest_trajectory_csv(d, m)
    d, m = write(tmp_path, HEADER, MANIFEST)
    with pytest.raises(FileNotFoundError):
        ingest_trajectory_csv(tmp_path / "missing.csv", m)


def test_batch_protocol_stand_in(tmp_path):
    # a synthetic stand-in: baseline contexts as reference, shifted ones as test
    ref = ctx.sample_baseline("spring", 2000, 1)
    same = ctx.sample_baseline("spring", 2000, 2)
    moved = ctx.sample_shifted(ctx.ShiftSetting("spring", "mean", "boundary", 1.0), 2000, 3)
    fn = lambda a, b, seed: run_method("context_mmd", None, a, b, 0.1, seed, 19)
    shifted = batch_protocol(fn, ref, moved, batch_size=128, repetitions=20, seed=0, method="context_mmd")
    assert shifted.rejection_rate == 1.0 and len(shifted.results) == 20
    null = batch_protocol(fn, ref, same, batch_size=128, repetitions=40, seed=0, method="context_mmd")
    assert null.rejection_rate <= 0.3
    again = batch_protocol(fn, ref, same, batch_size=128, repetitions=40, seed=0, method="context_mmd")
    assert again == null
    assert null.std_error == pytest.approx(np.sqrt(null.rejection_rate * (1 - null.rejection_rate) / 40))
