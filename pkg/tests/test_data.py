import csv

import numpy as np
import pytest

from ssmtraj.data import (
    Scene,
    ingest_table,
    load_processed,
    make_windows,
    save_processed,
    split,
    synth_generate,
)
from ssmtraj.errors import ContractError, FormatError, RowError, SchemaError
from ssmtraj.evaluation import compute_metrics, cv_predict
from ssmtraj.numcore import Rng


HEADER = "frame,id,x,y,xVelocity,yVelocity\n"


def _write(tmp_path, body, header=HEADER):
    path = tmp_path / "tracks.csv"
    path.write_text(header + body, encoding="utf-8")
    return path


def test_header_only_file_yields_no_scenes(tmp_path):
    assert ingest_table(_write(tmp_path, "")) == []


def test_single_agent_rows_become_one_track(tmp_path):
    body = "0,7,1.0,2.0,0.5,0.0\n1,7,1.5,2.0,0.5,0.0\n2,7,2.0,2.0,0.5,0.0\n"
    scenes = ingest_table(_write(tmp_path, body))
    assert len(scenes) == 1
    assert list(scenes[0].tracks) == [7]
    assert scenes[0].tracks[7].shape == (3, 5)


def test_interleaved_agents_match_reference_parse(tmp_path):
    rng = Rng(8)
    rows = []
    for frame in range(25):
        for agent in (1, 2):
            rows.append((frame, agent, rng.uniform(0, 100), rng.uniform(0, 10),
                         rng.uniform(-5, 5), rng.uniform(-5, 5)))
    Rng(9).shuffle(rows)
    body = "".join(f"{f},{a},{x!r},{y!r},{vx!r},{vy!r}\n"
                   for f, a, x, y, vx, vy in rows)
    path = _write(tmp_path, body)
    scenes = ingest_table(path)

    # independent line-by-line parse
    reference = {1: [], 2: []}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            reference[int(row["id"])].append(
                [float(row["frame"]), float(row["x"]), float(row["y"]),
                 float(row["xVelocity"]), float(row["yVelocity"])])
    for agent in (1, 2):
        expected = np.array(sorted(reference[agent], key=lambda r: r[0]))
        assert np.array_equal(scenes[0].tracks[agent], expected)


def test_missing_column_names_the_column(tmp_path):
    path = _write(tmp_path, "0,1,0,0\n", header="frame,id,x,y\n")
    with pytest.raises(SchemaError) as err:
        ingest_table(path)
    assert "xVelocity" in str(err.value)


def test_unparsable_row_reports_line_number(tmp_path):
    body = "0,1,0.0,0.0,1.0,0.0\n1,1,oops,0.0,1.0,0.0\n"
    with pytest.raises(RowError) as err:
        ingest_table(_write(tmp_path, body))
    assert err.value.line_number == 3


def test_schema_remapping(tmp_path):
    header = "t,vehicle,px,py,vx,vy\n"
    body = "0,1,0.0,0.0,1.0,0.0\n"
    path = _write(tmp_path, body, header=header)
    scenes = ingest_table(path, schema={
        "frame": "t", "id": "vehicle", "x": "px", "y": "py",
        "xVelocity": "vx", "yVelocity": "vy"})
    assert scenes[0].tracks[1][0, 1] == 0.0


def test_recording_column_splits_scenes(tmp_path):
    header = "recordingId,frame,id,x,y,xVelocity,yVelocity\n"
    body = "1,0,1,0,0,1,0\n2,0,1,5,5,1,0\n"
    scenes = ingest_table(_write(tmp_path, body, header=header))
    assert [s.scene_id for s in scenes] == [1, 2]


def _uniform_scene(n_frames, n_agents=2, frame_rate=25.0):
    tracks = {}
    for agent in range(1, n_agents + 1):
        frames = np.arange(n_frames, dtype=float)
        x = frames * 0.4 + agent
        y = np.full(n_frames, agent * 4.0)
        vx = np.full(n_frames, 10.0)
        vy = np.zeros(n_frames)
        tracks[agent] = np.column_stack([frames, x, y, vx, vy])
    return Scene(scene_id=0, frame_rate=frame_rate, tracks=tracks)


def test_exact_length_scene_gives_one_window():
    scene = _uniform_scene(8)
    windows = make_windows(scene, t_obs=5, t_f=3, stride=1)
    assert len(windows) == 1
    windows[0].validate()


def test_two_extra_frames_give_three_windows():
    scene = _uniform_scene(10)
    assert len(make_windows(scene, t_obs=5, t_f=3, stride=1)) == 3


def test_partially_present_agent_is_dropped_from_the_window():
    scene = _uniform_scene(8)
    scene.tracks[2] = scene.tracks[2][:4]  # half coverage
    windows = make_windows(scene, t_obs=5, t_f=3, stride=1)
    assert len(windows) == 1
    assert windows[0].agent_ids == [1]


def test_short_scene_gives_zero_windows():
    assert make_windows(_uniform_scene(5), t_obs=5, t_f=3) == []


def test_windows_do_not_depend_on_track_insertion_order():
    scene = _uniform_scene(8, n_agents=3)
    reordered = Scene(0, 25.0, {k: scene.tracks[k] for k in [3, 1, 2]})
    a = make_windows(scene, 5, 3)
    b = make_windows(reordered, 5, 3)
    assert a == b


def test_downsampled_window_spacing():
    scene = _uniform_scene(40)
    windows = make_windows(scene, t_obs=4, t_f=4, downsample=5)
    w = windows[0]
    assert w.dt == pytest.approx(0.2)
    gap = w.observed_states[1, 0, 0] - w.observed_states[0, 0, 0]
    assert gap == pytest.approx(0.4 * 5)


def test_observation_window_cap_enforced():
    scene = _uniform_scene(200)
    with pytest.raises(ContractError):
        make_windows(scene, t_obs=80, t_f=5)  # 3.2 s at 25 Hz


def test_split_sizes_with_floor_and_remainder():
    parts = split(list(range(10)), seed=1)
    assert tuple(len(p) for p in parts) == (8, 1, 1)
    parts = split([42], seed=1)
    assert tuple(len(p) for p in parts) == (1, 0, 0)
    parts = split(list(range(7)), seed=1)
    assert tuple(len(p) for p in parts) == (7, 0, 0)


def test_split_is_deterministic_and_partitions():
    items = list(range(50))
    a = split(items, seed=9)
    b = split(items, seed=9)
    assert a == b
    assert sorted(a[0] + a[1] + a[2]) == items


def test_split_rejects_bad_fractions():
    with pytest.raises(ContractError):
        split([1, 2], fractions=(0.5, 0.1, 0.1))


def test_noiseless_highway_is_exactly_linear_and_cv_perfect():
    scenes = synth_generate("highway", 2, 3, 0.0, seed=4, n_frames=60)
    for scene in scenes:
        for track in scene.tracks.values():
            x = track[:, 1]
            steps = np.diff(x)
            assert np.abs(steps - steps[0]).max() < 1e-9
            assert np.abs(track[:, 2] - track[0, 2]).max() == 0.0
    windows = make_windows(scenes[0], t_obs=5, t_f=10, stride=60)
    w = windows[0]
    pred = np.stack([cv_predict(w.observed_states[-1, a], w.t_f, w.dt)
                     for a in range(w.num_agents)])
    truth = w.future_states.transpose(1, 0, 2)[..., :2]
    report = compute_metrics(type("P", (), {"positions": pred,
                                            "covariances": None})(), truth)
    assert report.ade < 1e-9
    assert report.fde < 1e-9


def test_roundabout_angular_step_follows_speed_over_radius():
    scenes = synth_generate("roundabout", 1, 2, 0.0, seed=5, radius=20.0,
                            speed=10.0, n_frames=50)
    track = scenes[0].tracks[1]
    angles = np.arctan2(track[:, 2], track[:, 1])
    steps = np.diff(np.unwrap(angles))
    assert np.allclose(np.abs(steps), 0.02, atol=1e-9)  # (10 / 20) / 25 Hz


def test_synthetic_scenes_are_seed_deterministic():
    a = synth_generate("highway", 3, 2, 0.1, seed=6, n_frames=30)
    b = synth_generate("highway", 3, 2, 0.1, seed=6, n_frames=30)
    assert a == b
    c = synth_generate("highway", 3, 2, 0.1, seed=7, n_frames=30)
    assert a != c


def test_velocities_are_differenced_from_noisy_positions():
    scenes = synth_generate("highway", 1, 1, 0.05, seed=8, n_frames=40)
    track = scenes[0].tracks[1]
    fd = np.diff(track[:, 1]) * 25.0
    assert np.allclose(track[1:, 3], fd, atol=1e-12)


def test_empty_collection_roundtrips(tmp_path):
    path = tmp_path / "empty.ssmg"
    save_processed(path, [])
    assert load_processed(path) == []


def test_single_window_roundtrips_bit_exact(tmp_path):
    scenes = synth_generate("highway", 1, 3, 0.02, seed=9, n_frames=30)
    windows = make_windows(scenes[0], t_obs=4, t_f=3, stride=30)
    path = tmp_path / "one.ssmg"
    save_processed(path, windows)
    loaded = load_processed(path)
    assert loaded == windows


def test_hundred_random_windows_roundtrip_field_by_field(tmp_path):
    rng = Rng(10)
    windows = []
    for scene in synth_generate("roundabout", 20, 3, 0.05, seed=11, n_frames=60):
        windows.extend(make_windows(scene, t_obs=4, t_f=3, stride=11))
    windows = windows[:100]
    path = tmp_path / "many.ssmg"
    save_processed(path, windows)
    loaded = load_processed(path)
    assert len(loaded) == len(windows)
    for a, b in zip(loaded, windows):
        assert a.agent_ids == b.agent_ids
        assert np.array_equal(a.observed_states, b.observed_states)
        assert np.array_equal(a.future_states, b.future_states)
        assert a.dt == b.dt and a.scene_id == b.scene_id
        assert a.graphs == b.graphs
        a.validate()


def test_container_version_mismatch_rejected(tmp_path):
    path = tmp_path / "v.ssmg"
    save_processed(path, [])
    blob = bytearray(path.read_bytes())
    blob[4:8] = (77).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        load_processed(path)


def test_container_magic_mismatch_rejected(tmp_path):
    path = tmp_path / "m.ssmg"
    path.write_bytes(b"XXXX" + b"\x00" * 12)
    with pytest.raises(FormatError):
        load_processed(path)


def test_generated_windows_satisfy_type_invariants():
    for kind in ("highway", "roundabout"):
        for scene in synth_generate(kind, 2, 3, 0.05, seed=12, n_frames=60):
            for window in make_windows(scene, t_obs=5, t_f=4, stride=7):
                window.validate()
