import csv
import time
from pathlib import Path

import pytest

from hed.cli import main
from hed.config import ConfigError, load_config, parse_config_text
from hed.evaluation import read_metrics_csv


@pytest.fixture
def toy(tmp_path):
    assert main(["make-toy", "--out", str(tmp_path / "data"), "--users", "40", "--items", "50",
                 "--bundles", "90", "--groups", "3"]) == 0
    conf = tmp_path / "data" / "toy.conf"
    text = conf.read_text().replace("epochs = 20", "epochs = 6")
    conf.write_text(text)
    return conf


def _history(path):
    return Path(path, "history.csv").read_text()


class _Metrics:
    def __init__(self, path):
        self.meta, rows = read_metrics_csv(Path(path, "metrics.csv"))
        self.ks = [k for k, _, _ in rows]
        self.recall = [r for _, r, _ in rows]
        self.ndcg = [n for _, _, n in rows]


def _metrics(path):
    return _Metrics(path)


class TestConfig:
    def test_parse_and_comments(self):
        raw = parse_config_text("# x\nbeta = 1/100  # inline\nn=3\n")
        assert raw == {"beta": "1/100", "n": "3"}

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            parse_config_text("bogus = 1\n")

    def test_fraction_values_and_overrides(self, toy):
        cfg = load_config(toy).with_overrides({"beta": "1/20", "alpha": "0.25"})
        assert cfg.train.beta == pytest.approx(0.05)
        assert cfg.train.alpha == 0.25

    def test_paths_relative_to_config(self, toy):
        cfg = load_config(toy)
        assert cfg.path("user_bundle") == toy.parent / "user_bundle.txt"

    def test_hash_ignores_out(self, toy):
        cfg = load_config(toy)
        assert cfg.config_hash() == cfg.with_overrides({"out": "/elsewhere"}).config_hash()
        assert cfg.config_hash() != cfg.with_overrides({"seed": "9"}).config_hash()

    def test_shipped_configs_parse(self):
        root = Path(__file__).resolve().parents[1] / "configs"
        for name, d, n in [("youshu.conf", 64, 10), ("netease.conf", 128, 3)]:
            cfg = load_config(root / name)
            assert cfg.train.dim == d and cfg.hypergraph.n_threshold == n


class TestBuildGraph:
    def test_cache_and_stats(self, toy, tmp_path):
        out = tmp_path / "g"
        assert main(["build-graph", "--config", str(toy), "--out", str(out)]) == 0
        caches = list((out / "cache").glob("hypergraph-*.bin"))
        assert len(caches) == 1
        rows = dict(csv.reader((out / "stats.csv").open()))
        assert rows["n_users"] == "40" and rows["n_bundles"] == "90"

    def test_byte_identical_rebuild(self, toy, tmp_path):
        blobs = []
        for name in ("a", "b"):
            assert main(["build-graph", "--config", str(toy), "--out", str(tmp_path / name)]) == 0
            blobs.append(next((tmp_path / name / "cache").glob("*.bin")).read_bytes())
        assert blobs[0] == blobs[1]

    def test_missing_file_exit_2_no_cache(self, toy, tmp_path):
        (toy.parent / "bundle_item.txt").unlink()
        out = tmp_path / "g"
        assert main(["build-graph", "--config", str(toy), "--out", str(out)]) == 2
        assert not (out / "cache").exists()

    def test_bad_config_exit_2(self, tmp_path):
        conf = tmp_path / "bad.conf"
        conf.write_text("n_users = -3\n")
        assert main(["build-graph", "--config", str(conf)]) == 2


class TestTrain:
    def test_toy_run_under_a_minute(self, toy, tmp_path, capsys):
        out = tmp_path / "run"
        conf = toy.read_text().replace("epochs = 6", "epochs = 20")
        toy.write_text(conf)
        t0 = time.perf_counter()
        assert main(["train", "--config", str(toy), "--out", str(out)]) == 0
        assert time.perf_counter() - t0 < 60
        assert (out / "model.ckpt").is_file() and (out / "history.csv").is_file()
        assert len(_history(out).splitlines()) == 21
        assert "recall" in capsys.readouterr().out

    def test_rerun_identical(self, toy, tmp_path):
        for name in ("a", "b"):
            assert main(["train", "--config", str(toy), "--out", str(tmp_path / name)]) == 0
        assert _history(tmp_path / "a") == _history(tmp_path / "b")
        assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_hed_c_equals_beta_zero(self, toy, tmp_path):
        assert main(["train", "--config", str(toy), "--ablate", "hed-c", "--out", str(tmp_path / "c")]) == 0
        assert main(["train", "--config", str(toy), "--beta", "0", "--out", str(tmp_path / "b0")]) == 0
        rc, rb = _metrics(tmp_path / "c"), _metrics(tmp_path / "b0")
        assert rc.recall == rb.recall and rc.ndcg == rb.ndcg
        assert _history(tmp_path / "c") == _history(tmp_path / "b0")

    @pytest.mark.parametrize("variant", ["hed-cu", "hed-cb", "hed-cbu"])
    def test_ablations_run(self, toy, tmp_path, variant):
        out = tmp_path / variant
        assert main(["train", "--config", str(toy), "--ablate", variant, "--out", str(out)]) == 0
        assert _metrics(out).meta["ablate"] == variant

    def test_metadata_records_protocol(self, toy, tmp_path):
        assert main(["train", "--config", str(toy), "--out", str(tmp_path / "r")]) == 0
        meta = _metrics(tmp_path / "r").meta
        for key in ("config_hash", "seed", "dataset", "split", "masking", "averaging"):
            assert key in meta

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_4(self, toy, tmp_path):
        out = tmp_path / "r"
        code = main(["train", "--config", str(toy), "--out", str(out),
                     "--set", "learning_rate=1e300", "--set", "init_std=1e150"])
        assert code == 4

    def test_bad_override_exit_2(self, toy):
        assert main(["train", "--config", str(toy), "--set", "learning_rate"]) == 2
        assert main(["train", "--config", str(toy), "--set", "nonsense=1"]) == 2

    def test_k_larger_than_bundles_exit_2(self, toy, tmp_path):
        assert main(["train", "--config", str(toy), "--set", "ks=20,400",
                     "--out", str(tmp_path / "r")]) == 2


class TestEvaluate:
    @pytest.fixture
    def trained(self, toy, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--config", str(toy), "--set", "ks=5,10,20", "--out", str(out)]) == 0
        return toy, out

    def test_reproduces_trainer(self, trained, tmp_path):
        toy, out = trained
        ev = tmp_path / "ev"
        assert main(["evaluate", "--config", str(toy), "--checkpoint", str(out / "model.ckpt"),
                     "--set", "ks=5,10,20", "--out", str(ev)]) == 0
        assert (ev / "metrics.csv").read_bytes() == (out / "metrics.csv").read_bytes()
        last = list(csv.DictReader((out / "history.csv").open()))[-1]
        rep = _metrics(ev)
        j = rep.ks.index(10)
        assert float(last["recall@10"]) == rep.recall[j]
        assert float(last["ndcg@10"]) == rep.ndcg[j]

    def test_three_rows(self, trained, tmp_path):
        toy, out = trained
        ev = tmp_path / "ev"
        assert main(["evaluate", "--config", str(toy), "--checkpoint", str(out / "model.ckpt"),
                     "--set", "ks=20,40,80", "--out", str(ev)]) == 0
        rows = (ev / "metrics.csv").read_text().splitlines()
        assert [r.split(",")[0] for r in rows if not r.startswith("#")] == ["k", "20", "40", "80"]

    def test_corrupted_checkpoint_exit_2(self, trained, tmp_path):
        toy, out = trained
        blob = bytearray((out / "model.ckpt").read_bytes())
        blob[100] ^= 0xFF
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(bytes(blob))
        ev = tmp_path / "ev"
        assert main(["evaluate", "--config", str(toy), "--checkpoint", str(bad), "--out", str(ev)]) == 2
        assert not ev.exists()

    def test_shape_mismatch_exit_2(self, trained, tmp_path):
        toy, out = trained
        ev = tmp_path / "ev"
        assert main(["evaluate", "--config", str(toy), "--checkpoint", str(out / "model.ckpt"),
                     "--set", "embedding_size=8", "--out", str(ev)]) == 2
        assert not ev.exists()

    def test_missing_checkpoint_exit_2_or_3(self, toy, tmp_path):
        code = main(["evaluate", "--config", str(toy), "--checkpoint", str(tmp_path / "none.ckpt")])
        assert code in (2, 3)


class TestSweep:
    def test_rows_and_subdirs(self, toy, tmp_path):
        out = tmp_path / "s"
        values = "1,1/5,1/10,1/20,1/100"
        assert main(["sweep", "--config", str(toy), "--param", "beta", "--values", values,
                     "--out", str(out), "--set", "epochs=2"]) == 0
        rows = list(csv.DictReader((out / "sweep-beta" / "sweep.csv").open()))
        assert len(rows) == 5 * 3
        assert [r["value"] for r in rows[::3]] == values.split(",")

    def test_single_value_equals_train(self, toy, tmp_path):
        out = tmp_path / "s"
        assert main(["sweep", "--config", str(toy), "--param", "n", "--values", "2",
                     "--out", str(out)]) == 0
        assert main(["train", "--config", str(toy), "--set", "n=2", "--out", str(tmp_path / "t")]) == 0
        sub = out / "sweep-n" / "n=2"
        assert (sub / "metrics.csv").read_bytes() == (tmp_path / "t" / "metrics.csv").read_bytes()
        rows = list(csv.DictReader((out / "sweep-n" / "sweep.csv").open()))
        rep = _metrics(tmp_path / "t")
        assert [float(r["recall"]) for r in rows] == rep.recall

    def test_unknown_parameter_exit_2(self, toy, tmp_path):
        assert main(["sweep", "--config", str(toy), "--param", "gamma", "--values", "1",
                     "--out", str(tmp_path / "s")]) == 2


class TestSubsample:
    def test_subsample_trains(self, toy, tmp_path):
        sub = tmp_path / "sub"
        assert main(["subsample", "--config", str(toy), "--fraction", "0.5", "--out", str(sub)]) == 0
        cfg = load_config(sub / "dataset.conf")
        assert cfg.counts[0] == 20
        assert main(["train", "--config", str(sub / "dataset.conf"), "--set", "epochs=2",
                     "--set", "ks=1,2", "--set", "eval_k=2"]) == 0
