import json

import numpy as np
import pytest
import yaml
from PIL import Image

from manifold_wss.cli import Pipeline, emit_overlays, main
from manifold_wss.config import PRESETS, ConfigError, load_config, parse_override, resolve

SMALL = ["data.synthetic.n_per_class=8", "data.synthetic_test_per_class=2",
         "manifold.train.epochs=2", "manifold.train.finetune_epochs=1", "classifier.epochs=1",
         "seg.train.epochs=1", "nets.unet.init_filters=4", "overlays=3"]


def _args(out, *extra):
    args = ["--set", f"output_dir={out}"]
    for s in SMALL + list(extra):
        args += ["--set", s]
    return args


# config ----------------------------------------------------------------------


def test_full_scale_preset_values():
    cfg = resolve({"preset": "paper", "data": {"train_manifest": None, "synthetic": {"num_classes": 7}}})
    m = cfg.manifold.train
    assert (m.dim, m.margin.alpha, m.margin.beta, m.batch_size, m.per_class) == (128, 0.2, 1.2, 32, 8)
    assert (m.epochs, m.finetune_epochs, m.learner_epochs) == (300, 50, 250)
    assert cfg.extract.threshold == 0.5
    assert cfg.nets.unet.init_filters == 32 and cfg.seg.train.batch_size == 16
    assert PRESETS["paper"]["data"]["image_size"] == [224, 224]
    assert cfg.nets.backbone.preset == "paper_resnet50_3blocks"


def test_full_scale_preset_needs_data():
    with pytest.raises(ConfigError, match="data"):
        resolve({"preset": "paper"})


def test_unknown_key_names_key():
    with pytest.raises(ConfigError, match=r"manifold\.train\.epoch"):
        resolve({"preset": "synthetic"}, ["manifold.train.epoch=3"])
    with pytest.raises(ConfigError, match="'bogus'"):
        resolve({"preset": "synthetic", "bogus": 1})


def test_field_level_messages():
    with pytest.raises(ConfigError, match="extract"):
        resolve({"preset": "synthetic"}, ["extract.threshold=1.5"])
    with pytest.raises(ConfigError, match="manifold.mode"):
        resolve({"preset": "synthetic"}, ["manifold.mode=triplet"])
    with pytest.raises(ConfigError, match="train_manifest"):
        resolve({"preset": "synthetic"}, ["data.train_manifest=/nonexistent.csv"])
    with pytest.raises(ConfigError, match="divisible"):
        resolve({"preset": "synthetic"}, ["data.synthetic.image_size=36"])


def test_override_parsing():
    assert parse_override("a.b.c=3") == {"a": {"b": {"c": 3}}}
    assert parse_override("x=[1, 2]") == {"x": [1, 2]}
    cfg = resolve({"preset": "synthetic"}, ["manifold.train.lr=1e-3", "extract.threshold=0.4"])
    assert cfg.manifold.train.lr == 1e-3 and cfg.extract.threshold == 0.4
    with pytest.raises(ConfigError, match="manifold.train.epochs"):
        resolve({"preset": "synthetic"}, ["manifold.train.epochs=ten"])
    with pytest.raises(ConfigError):
        parse_override("novalue")


def test_yaml_file_and_snapshot_roundtrip(tmp_path):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"preset": "synthetic", "seed": 4}))
    cfg = load_config(tmp_path / "c.yaml", ["manifold.train.lr=0.001"])
    assert cfg.seed == 4 and cfg.manifold.train.lr == 1e-3
    (tmp_path / "snap.json").write_text(json.dumps(cfg.to_dict()))
    again = load_config(tmp_path / "snap.json")
    assert again.to_dict() == cfg.to_dict()


def test_data_root_from_config_beats_env(tmp_path, monkeypatch):
    imgs = tmp_path / "imgs"
    imgs.mkdir()
    for i in range(2):
        Image.fromarray(np.zeros((64, 64, 3), np.uint8)).save(imgs / f"{i}.png")
    (tmp_path / "m.csv").write_text("id,path,label\na,0.png,1\nb,1.png,2\n")
    monkeypatch.setenv("MANIFOLD_WSS_DATA_ROOT", str(tmp_path / "elsewhere"))
    cfg = resolve({"preset": "synthetic"}, ["data.synthetic=null", f"data.train_manifest={tmp_path / 'm.csv'}",
                                            f"data.data_root={imgs}", f"output_dir={tmp_path / 'o'}"])
    assert Pipeline(cfg)._manifest("train").ids == ["a", "b"]


# subcommands ----------------------------------------------------------------------


def test_cli_unknown_key_exit_1(tmp_path, capsys):
    assert main(["synth-gen", "--set", "data.nonsense=1", "--set", f"output_dir={tmp_path}"]) == 1
    assert "data.nonsense" in capsys.readouterr().err


def test_cli_missing_checkpoint_exit_2(tmp_path, capsys):
    assert main(["synth-gen"] + _args(tmp_path)) == 0
    assert main(["extract-attention"] + _args(tmp_path)) == 2
    assert "missing checkpoint" in capsys.readouterr().err
    assert main(["train-seg"] + _args(tmp_path)) == 2
    assert main(["report"] + _args(tmp_path)) == 2


def test_cli_missing_data_exit_2(tmp_path, capsys):
    assert main(["train-manifold"] + _args(tmp_path)) == 2
    assert "synth-gen" in capsys.readouterr().err


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipe")
    assert main(["pipeline"] + _args(out)) == 0
    return out


def test_pipeline_artifact_inventory(small_run):
    r = small_run
    assert (r / "train-manifold" / "model.pt").is_file()
    assert (r / "train-manifold" / "train_log.jsonl").is_file()
    assert len(list((r / "extract-attention" / "train" / "saliency").glob("*.png"))) == 32
    assert (r / "extract-attention" / "train" / "proxy_manifest.csv").is_file()
    assert (r / "gradcam" / "eval" / "proxy_manifest.csv").is_file()
    for src in ("attention", "gradcam"):
        assert (r / "train-seg" / src / "model.pt").is_file()
        assert (r / "train-seg" / src / "eval" / "predictions.csv").is_file()
        for stage in ("init_maps", "unet"):
            rep = json.loads((r / "evaluate" / f"{src}_{stage}.json").read_text())
            assert set(rep) >= {"method", "split", "stage", "mean", "per_image"}
        assert len(list((r / "overlays" / src).glob("*.png"))) == 3
    assert (r / "report" / "table.csv").read_text().startswith("method,init maps,U-net")
    for stage in ("synth-gen", "train-manifold", "extract-attention", "train-classifier", "gradcam",
                  "train-seg", "evaluate", "report", "overlays"):
        snap = json.loads((r / stage / "config.json").read_text())
        assert snap["output_dir"] == str(r)


def test_train_manifold_mode_flag(small_run, tmp_path):
    assert main(["train-manifold", "--mode", "ml"] + _args(small_run)) == 0
    snap = json.loads((small_run / "train-manifold" / "config.json").read_text())
    assert snap["manifold"]["mode"] == "ml"
    assert main(["evaluate"] + _args(small_run)) == 0
    rep = json.loads((small_run / "evaluate" / "attention_init_maps.json").read_text())
    assert rep["method"] == "ML + Attention"


def test_full_scale_preset_phase_switch(tmp_path):
    # full-scale schedule and batch shape; tiny backbone and one batch per epoch keep it fast
    args = ["--preset", "paper", "--set", f"output_dir={tmp_path}",
            "--set", "data.synthetic={n_per_class: 8, num_classes: 4, image_size: 64}",
            "--set", "nets.backbone.preset=tiny", "--set", "manifold.train.batches_per_epoch=1"]
    assert main(["synth-gen"] + args) == 0
    assert main(["train-manifold", "--mode", "dcml"] + args) == 0
    log = [json.loads(x) for x in (tmp_path / "train-manifold" / "train_log.jsonl").read_text().splitlines()]
    assert len(log) == 300
    assert log[249]["phase"] == "learner" and log[250]["phase"] == "full"
    assert {r["phase"] for r in log[250:]} == {"full"}


# overlays ------------------------------------------------------------------------


def _overlay_inputs(n=3, size=16, value=None):
    rng = np.random.default_rng(0)
    ids = [f"im{i}" for i in range(n)]
    images = {i: rng.random((3, size, size)) for i in ids}
    sal = {i: np.full((size, size), value) if value is not None else rng.random((size, size)) for i in ids}
    masks = {i: (sal[i] > 0.5).astype(np.uint8) for i in ids}
    return images, sal, masks


def test_overlays_cardinality_and_determinism(tmp_path):
    images, sal, masks = _overlay_inputs()
    a = emit_overlays(images, sal, masks, tmp_path / "a")
    b = emit_overlays(images, sal, masks, tmp_path / "b")
    assert len(a) == 3
    assert all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))
    assert np.asarray(Image.open(a[0])).shape == (16, 48, 3)


def test_overlays_constant_half(tmp_path):
    images, sal, masks = _overlay_inputs(1, 8, value=0.5)
    (p,) = emit_overlays(images, sal, masks, tmp_path)
    heat = np.asarray(Image.open(p))[:, 8:16]
    assert np.all(heat == heat[0, 0])
    r, g, b = heat[0, 0].astype(int)
    assert g > 200 and r < 200 and b < 200  # middle of the jet ramp is green
    assert np.all(np.asarray(Image.open(p))[:, 16:] == 0)


def test_overlays_id_mismatch(tmp_path):
    images, sal, masks = _overlay_inputs()
    sal.pop("im1")
    with pytest.raises(ValueError, match="ids"):
        emit_overlays(images, sal, masks, tmp_path)
