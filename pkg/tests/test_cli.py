import io

import pytest

from multisource.cli import DEFAULTS, main, parse_config_text, resolve_config, UsageError

SMALL = [
    "--set", "task.vocab_size=12", "--set", "task.min_len=3", "--set", "task.max_len=5",
    "--set", "task.n_train=40", "--set", "task.n_dev=6", "--set", "task.seed=7",
]
TINY_MODEL = [
    "--set", "model.d=16", "--set", "model.heads=2", "--set", "model.d_ff=32",
    "--set", "model.enc_layers=1", "--set", "model.dec_layers=1", "--set", "model.max_len=12",
    "--set", "train.max_steps=6", "--set", "train.batch_size=8", "--set", "train.eval_interval=3",
    "--set", "decode.max_len=8",
]


def run(*argv):
    buf = io.StringIO()
    code = main([str(a) for a in argv], out=buf)
    return code, buf.getvalue()


def files(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.is_file()}


@pytest.fixture
def data_dir(tmp_path):
    code, _ = run("gen-data", "--out", tmp_path / "data", *SMALL)
    assert code == 0
    return tmp_path / "data"


def test_config_parsing():
    assert parse_config_text("# c\nmodel.d = 32  # inline\n\n") == {"model.d": "32"}
    with pytest.raises(UsageError):
        parse_config_text("model.d 32")


def test_unknown_key_lists_valid_keys(tmp_path, capsys):
    with pytest.raises(UsageError, match="model.heads"):
        resolve_config(overrides=["model.depth=3"])
    cfg = tmp_path / "x.cfg"
    cfg.write_text("train.colour=red\n")
    code, _ = run("gen-data", "--out", tmp_path / "d", "--config", cfg)
    assert code == 1
    assert "valid keys" in capsys.readouterr().err


def test_exit_codes(tmp_path, data_dir):
    assert run("no-such-command")[0] == 1
    assert run("gen-data")[0] == 1
    assert run("translate", "--checkpoint", tmp_path / "missing.ckpt", "--data", data_dir)[0] == 2
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nope")
    assert run("eval", "--checkpoint", bad, "--data", data_dir)[0] == 2


def test_gen_data_is_reproducible(tmp_path, data_dir):
    code, out = run("gen-data", "--out", tmp_path / "again", *SMALL)
    assert code == 0
    assert out.splitlines()[0] == "seed=7"
    assert "task.n_train=40" in out.splitlines()
    assert files(data_dir) == files(tmp_path / "again")
    assert set(files(data_dir)) == {"train.txt", "dev.txt", "vocab.txt", "task.cfg"}


def test_feature_task_writes_sidecar(tmp_path):
    code, _ = run("gen-data", "--out", tmp_path / "f", "--set", "task.kind=feature_disambiguation",
                  "--set", "task.n_train=5", "--set", "task.n_dev=2")
    assert code == 0
    assert (tmp_path / "f" / "train.txt.features").exists()


def train_once(data_dir, out_dir, strategy="hierarchical"):
    out_dir.mkdir(exist_ok=True)
    ckpt = out_dir / "m.ckpt"
    code, _ = run("train", "--data", data_dir, "--out", ckpt, "--log", out_dir / "train.log",
                  "--set", f"model.strategy={strategy}", *TINY_MODEL)
    assert code == 0
    return ckpt


def test_train_translate_eval_viz_end_to_end(tmp_path, data_dir):
    runs = []
    for name in ("a", "b"):
        d = tmp_path / name
        ckpt = train_once(data_dir, d)
        assert run("translate", "--checkpoint", ckpt, "--data", data_dir, "--output", d / "hyp.txt",
                   *TINY_MODEL)[0] == 0
        assert run("translate", "--checkpoint", ckpt, "--data", data_dir, "--output", d / "hyp1.txt",
                   "--set", "decode.beam_width=1", *TINY_MODEL)[0] == 0
        code, out = run("viz", "--checkpoint", ckpt, "--data", data_dir, "--index", 2,
                        "--out", d / "viz" / "ex2", *TINY_MODEL)
        assert code == 0
        code, eval_out = run("eval", "--checkpoint", ckpt, "--data", data_dir, *TINY_MODEL)
        assert code == 0 and "token_accuracy=" in eval_out
        code, adv = run("eval-adversarial", "--checkpoint", ckpt, "--data", data_dir, "--source", 1,
                        "--seed", 3, "--set", "decode.beam_width=1", *TINY_MODEL)
        assert code == 0 and "delta\t" in adv
        runs.append((d, eval_out, adv))

    (a, eval_a, adv_a), (b, eval_b, adv_b) = runs
    assert eval_a == eval_b and adv_a == adv_b
    for name in ("m.ckpt", "hyp.txt", "hyp1.txt"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert files(a / "viz") == files(b / "viz")
    assert set(files(a / "viz")) == {"ex2.csv", "ex2.pgm", "ex2.contexts.csv", "ex2.contexts.pgm"}
    assert len((a / "hyp.txt").read_text().splitlines()) == 6

    def strip_seconds(path):
        return [line.rsplit("\t", 1)[0] for line in path.read_text().splitlines()]

    assert strip_seconds(a / "train.log") == strip_seconds(b / "train.log")
    assert strip_seconds(a / "train.log")[0] == "step\tloss\tlr\ttoken_accuracy"
    assert len(strip_seconds(a / "train.log")) == 3


def test_viz_bad_index_is_usage_error(tmp_path, data_dir):
    ckpt = train_once(data_dir, tmp_path / "m", strategy="flat")
    assert run("viz", "--checkpoint", ckpt, "--data", data_dir, "--index", 99,
               "--out", tmp_path / "v", *TINY_MODEL)[0] == 1
    code, _ = run("viz", "--checkpoint", ckpt, "--data", data_dir, "--out", tmp_path / "v", *TINY_MODEL)
    assert code == 0
    assert not (tmp_path / "v.contexts.csv").exists()


def test_defaults_cover_documented_sections():
    sections = {k.split(".")[0] for k in DEFAULTS}
    assert sections == {"model", "train", "task", "decode"}
