import numpy as np
import pytest

from foldreg.cli import main
from foldreg.model import load_checkpoint
from foldreg.trainer import load_dataset
from foldreg.volume import DisplacementField, load_field, load_volume, save_field


def run(argv):
    return main(argv)


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "synth"
    code = run(["synth", "--seed", "7", "--n", "4", "--dims", "8", "--labels", "3",
                "--out", str(out)])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def direct_ckpt(tmp_path_factory, synth_dir):
    out = tmp_path_factory.mktemp("runs") / "direct"
    code = run(["train", "--data", str(synth_dir), "--model", "direct", "--alpha", "0.1",
                "--beta", "0.01", "--lr", "0.05", "--steps", "20", "--seed", "1",
                "--cc", "global", "--out", str(out)])
    assert code == 0
    return out / "checkpoint.fck"


class TestSynth:
    def test_outputs_and_manifest(self, synth_dir):
        ds = load_dataset(synth_dir)
        assert len(ds.ids) == 4
        assert len(ds.volumes) == 4
        assert len(ds.labels) == 4
        assert len(ds.fields) == 4

    def test_deterministic_bytes(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        for out in (a, b):
            assert run(["synth", "--seed", "3", "--n", "2", "--dims", "8", "--out", str(out)]) == 0
        for rel in ["manifest.txt", "volumes/s00.frv", "labels/s01.frv", "fields/s00.frv"]:
            assert (a / rel).read_bytes() == (b / rel).read_bytes()

    def test_bad_dims_usage_error(self, tmp_path):
        assert run(["synth", "--seed", "1", "--n", "2", "--dims", "18", "--out", str(tmp_path / "x")]) == 1

    def test_unknown_flag_rejected(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            run(["synth", "--nope", "1", "--out", str(tmp_path / "x")])
        assert exc.value.code == 1


class TestTrain:
    def test_train_direct_outputs(self, direct_ckpt):
        assert direct_ckpt.is_file()
        meta, arrays = load_checkpoint(direct_ckpt)
        assert meta["kind"] == "direct"
        assert any(k.startswith("field:") for k in arrays)
        log = direct_ckpt.parent / "loss_log.csv"
        lines = log.read_text().strip().splitlines()
        assert lines[0] == "step,epoch,source,target,image,r1,r2,total"
        assert len(lines) == 1 + 12 * 20  # 4 subjects -> 12 pairs x 20 steps
        # r2 is logged and weighted into the total exactly (alpha=0.1, beta=0.01)
        image, r1, r2, total = (float(v) for v in lines[-1].split(",")[4:])
        assert total == image + 0.1 * r1 + 0.01 * r2

    def test_train_faim_log_rows(self, synth_dir, tmp_path):
        out = tmp_path / "faim"
        code = run(["train", "--data", str(synth_dir), "--model", "faim", "--epochs", "1",
                    "--lr", "1e-4", "--seed", "0", "--cc", "global", "--out", str(out)])
        assert code == 0
        lines = (out / "loss_log.csv").read_text().strip().splitlines()
        assert len(lines) == 1 + 12
        meta, _ = load_checkpoint(out / "checkpoint.fck")
        assert meta["kind"] == "faim"

    def test_missing_data_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run(["train", "--out", str(tmp_path / "x")])
        assert exc.value.code == 1

    def test_nonexistent_data_runtime_error(self, tmp_path):
        code = run(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "x")])
        assert code == 2


class TestRegister:
    def test_register_pair_from_direct_checkpoint(self, synth_dir, direct_ckpt, tmp_path):
        from foldreg.loss import global_cc

        src = synth_dir / "volumes" / "s00.frv"
        tgt = synth_dir / "volumes" / "s01.frv"
        out_field = tmp_path / "u.frv"
        out_warped = tmp_path / "w.frv"
        code = run(["register", "--checkpoint", str(direct_ckpt), "--source", str(src),
                    "--target", str(tgt), "--out-field", str(out_field),
                    "--out-warped", str(out_warped)])
        assert code == 0
        u = load_field(out_field)
        assert u.dims == (8, 8, 8)
        warped = load_volume(out_warped)
        assert warped.dims == (8, 8, 8)
        # the pair was trained on, so the warped source correlates better
        # with the target than the unwarped source does
        source, target = load_volume(src), load_volume(tgt)
        assert global_cc(warped, target) > global_cc(source, target)

    def test_corrupt_checkpoint_exit_2(self, synth_dir, tmp_path):
        bad = tmp_path / "bad.fck"
        bad.write_bytes(b"NOPE" + b"\x00" * 32)
        code = run(["register", "--checkpoint", str(bad),
                    "--source", str(synth_dir / "volumes" / "s00.frv"),
                    "--target", str(synth_dir / "volumes" / "s01.frv"),
                    "--out-field", str(tmp_path / "u.frv"),
                    "--out-warped", str(tmp_path / "w.frv")])
        assert code == 2


class TestEvaluate:
    def test_report_written(self, synth_dir, direct_ckpt, tmp_path):
        report = tmp_path / "report.csv"
        per_label = tmp_path / "labels.csv"
        code = run(["evaluate", "--checkpoint", str(direct_ckpt), "--data", str(synth_dir),
                    "--report", str(report), "--per-label", str(per_label)])
        assert code == 0
        lines = report.read_text().strip().splitlines()
        assert lines[0] == "source,target,mean_dice,n_fold,image,r1,r2,total"
        assert len(lines) == 1 + 12 + 1
        assert per_label.read_text().startswith("source,target,label,dice")

    def test_unlabeled_dataset_exit_2(self, synth_dir, direct_ckpt, tmp_path):
        stripped = tmp_path / "unlabeled"
        stripped.mkdir()
        (stripped / "volumes").mkdir()
        lines = []
        for line in (synth_dir / "manifest.txt").read_text().splitlines():
            if line.startswith("volume"):
                lines.append(line)
                sid = line.split()[1]
                data = (synth_dir / "volumes" / f"{sid}.frv").read_bytes()
                (stripped / "volumes" / f"{sid}.frv").write_bytes(data)
        (stripped / "manifest.txt").write_text("\n".join(lines) + "\n")
        code = run(["evaluate", "--checkpoint", str(direct_ckpt), "--data", str(stripped),
                    "--report", str(tmp_path / "r.csv")])
        assert code == 2


class TestJmap:
    def test_zero_field(self, tmp_path, capsys):
        u = DisplacementField(np.zeros((3, 4, 4, 4), dtype=np.float32))
        path = tmp_path / "u.frv"
        save_field(u, path)
        code = run(["jmap", "--field", str(path), "--out-det", str(tmp_path / "d.frv"),
                    "--out-mask", str(tmp_path / "m.frv")])
        assert code == 0
        assert "N=0" in capsys.readouterr().out
        det = load_volume(tmp_path / "d.frv")
        assert np.allclose(det.data, 1.0)
        mask = load_volume(tmp_path / "m.frv")
        assert not mask.data.any()

    def test_everywhere_folding_field(self, tmp_path, capsys):
        grid = np.indices((4, 4, 4)).astype(np.float32)
        u_arr = np.zeros((3, 4, 4, 4), dtype=np.float32)
        u_arr[0] = -2.0 * grid[0]
        save_field(DisplacementField(u_arr), tmp_path / "u.frv")
        code = run(["jmap", "--field", str(tmp_path / "u.frv"),
                    "--out-det", str(tmp_path / "d.frv"), "--out-mask", str(tmp_path / "m.frv")])
        assert code == 0
        assert "N=64" in capsys.readouterr().out
        mask = load_volume(tmp_path / "m.frv")
        assert mask.data.all()

    def test_synth_ground_truth_is_fold_free(self, synth_dir, tmp_path, capsys):
        code = run(["jmap", "--field", str(synth_dir / "fields" / "s00.frv"),
                    "--out-det", str(tmp_path / "d.frv"), "--out-mask", str(tmp_path / "m.frv")])
        assert code == 0
        assert "N=0" in capsys.readouterr().out

    def test_non_field_input_exit_2(self, synth_dir, tmp_path):
        code = run(["jmap", "--field", str(synth_dir / "volumes" / "s00.frv"),
                    "--out-det", str(tmp_path / "d.frv"), "--out-mask", str(tmp_path / "m.frv")])
        assert code == 2


class TestGradcheckCmd:
    def test_passes_on_defaults(self, capsys):
        assert run(["gradcheck", "--seed", "0", "--size", "4"]) == 0
        out = capsys.readouterr().out
        assert "conv3d" in out
        assert "FAIL" not in out

    def test_impossible_tolerance_fails(self, capsys):
        assert run(["gradcheck", "--seed", "0", "--size", "4", "--tol", "1e-12"]) == 2
        assert "FAIL" in capsys.readouterr().out


class TestDescribe:
    def test_default_config(self, capsys):
        assert run(["describe"]) == 0
        out = capsys.readouterr().out
        assert "add skips: 3" in out
        assert "pooling layers: 0" in out

    def test_checkpoint(self, direct_ckpt, capsys):
        assert run(["describe", "--checkpoint", str(direct_ckpt)]) == 0
        assert str(3 * 8**3) in capsys.readouterr().out

    def test_invalid_kernel_usage_error(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("head_kernel=4\n")
        assert run(["describe", "--config", str(cfg)]) == 1
