import numpy as np
import pytest

from multisource.decoding import attention_records, batch_sources
from multisource.model import ModelConfig, MultiSourceTransformer
from multisource.tasks import TaskSpec, generate
from multisource.viz import (
    HeatmapSpec,
    attention_blocks,
    context_matrix,
    export_attention_csv,
    export_context_csv,
    export_context_pgm,
    export_heatmap_pgm,
    read_attention_csv,
    read_pgm,
    to_pgm,
)

STRATEGIES = ["serial", "parallel", "flat", "hierarchical"]


def records_for(strategy, seed=0):
    cfg = ModelConfig(d=16, heads=2, d_ff=32, enc_layers=1, dec_layers=2, n_sources=2,
                      strategy=strategy, vocab_size=16, max_len=16, seed=seed)
    m = MultiSourceTransformer(cfg)
    ex = generate(TaskSpec(n_examples=1, vocab_size=16, min_len=5, max_len=5, seed=seed))[0]
    tokens = ex.target[:4]
    recs = attention_records(m, batch_sources(m, [ex]), tokens)
    labels = [[f"w{t}" for t in s] for s in ex.sources]
    return recs, labels, ["<s>"] + [f"w{t}" for t in tokens]


@pytest.mark.parametrize("strategy", STRATEGIES)
@pytest.mark.parametrize("head", [None, 0, 1])
def test_csv_roundtrip_and_row_sums(tmp_path, strategy, head):
    recs, src, tgt = records_for(strategy)
    spec = HeatmapSpec(layer=1, head=head)
    path = tmp_path / "a.csv"
    export_attention_csv(recs, spec, path, src, tgt)
    cols, rows, matrix = read_attention_csv(path)
    blocks = attention_blocks(recs, spec)
    assert matrix.tobytes() == np.concatenate(blocks, -1).tobytes()
    assert rows == tgt
    assert cols[:5] == [f"src0:{t}" for t in src[0]] and cols[5:] == [f"src1:{t}" for t in src[1]]
    assert matrix.shape == (len(tgt), sum(len(s) for s in src))
    if strategy in ("serial", "parallel"):
        for part in (matrix[:, :5], matrix[:, 5:]):
            np.testing.assert_allclose(part.sum(-1), 1.0, atol=1e-6)
    else:
        # flat shares one softmax; hierarchical is a mixture over encoders
        np.testing.assert_allclose(matrix.sum(-1), 1.0, atol=1e-6)


def test_single_encoder_selection(tmp_path):
    recs, src, tgt = records_for("parallel")
    path = tmp_path / "e.csv"
    export_attention_csv(recs, HeatmapSpec(encoder=1), path, src, tgt)
    cols, _, matrix = read_attention_csv(path)
    assert cols == [f"src1:{t}" for t in src[1]]
    np.testing.assert_allclose(matrix.sum(-1), 1.0, atol=1e-6)


def test_hierarchical_combination_is_inner_times_outer():
    recs, _, _ = records_for("hierarchical")
    cross = recs[0].cross
    blocks = attention_blocks(recs, HeatmapSpec(layer=0, head=1))
    outer = cross.context_weights[1][0]
    for i, block in enumerate(blocks):
        np.testing.assert_allclose(block, cross.encoder_weights[i][1][0] * outer[:, i:i + 1], rtol=1e-15)
    mean_blocks = attention_blocks(recs, HeatmapSpec(layer=0))
    outer_mean = np.mean(cross.context_weights, axis=0)[0]
    inner_mean = np.mean(cross.encoder_weights[0], axis=0)[0]
    np.testing.assert_allclose(mean_blocks[0], inner_mean * outer_mean[:, :1], rtol=1e-14)


def test_context_export(tmp_path):
    recs, _, tgt = records_for("hierarchical")
    export_context_csv(recs, HeatmapSpec(), tmp_path / "c.csv", tgt)
    cols, _, matrix = read_attention_csv(tmp_path / "c.csv")
    assert cols == ["src0", "src1"]
    np.testing.assert_allclose(matrix.sum(-1), 1.0, atol=1e-9)
    export_context_pgm(recs, HeatmapSpec(), tmp_path / "c.pgm")
    assert read_pgm(tmp_path / "c.pgm").shape == (len(tgt), 2)
    flat_recs, _, _ = records_for("flat")
    with pytest.raises(ValueError):
        context_matrix(flat_recs, HeatmapSpec())


def test_pgm_pixels_and_dimensions(tmp_path):
    text = to_pgm(np.array([[1.0, 0.0, 0.5], [0.25, 0.75, 0.0]]))
    assert text.splitlines()[:3] == ["P2", "3 2", "255"]
    assert text.splitlines()[3:] == ["255 0 128", "64 191 0"]
    recs, src, tgt = records_for("serial")
    export_heatmap_pgm(recs, HeatmapSpec(), tmp_path / "h.pgm")
    img = read_pgm(tmp_path / "h.pgm")
    assert img.shape == (len(tgt), 10)
    assert img.min() >= 0 and img.max() <= 255


@pytest.mark.parametrize("spec", [HeatmapSpec(layer=2), HeatmapSpec(layer=-3), HeatmapSpec(head=2),
                                  HeatmapSpec(encoder=2)])
def test_out_of_range_selectors(spec):
    recs, _, _ = records_for("flat")
    with pytest.raises(IndexError):
        attention_blocks(recs, spec)


def test_label_mismatch_rejected(tmp_path):
    recs, src, tgt = records_for("serial")
    with pytest.raises(ValueError):
        export_attention_csv(recs, HeatmapSpec(), tmp_path / "x.csv", src, tgt[:-1])
