"""Smoke test for the dlmfp extension. Build it first:

    cd crates/python && maturin develop --release
"""

import os
import tempfile

import dlmfp


def main():
    m = dlmfp.Model.transformer(seed=7)
    assert m.param_count == 968, m.param_count
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "demo.dlmw")
        assert m.save(path) == 2947514463596842830
        again = dlmfp.Model.load(path)
        assert again.logits([1, 2, 3]) == m.logits([1, 2, 3])

    prompt = dlmfp.rule_prompt(seed=1, length=6)
    base = dlmfp.decode(m, prompt, 20, steps=20, block_size=5)
    cached = dlmfp.decode(m, prompt, 20, policy="freecache", steps=20, block_size=5)
    assert base.tokens == cached.tokens
    assert cached.total_flops < base.total_flops
    print("baseline ", base)
    print("freecache", cached)

    dlm = dlmfp.Model.rule(1.0)
    guider = dlmfp.Model.rule(1.0, causal=True)
    g = dlmfp.decode(dlm, dlmfp.rule_prompt(0, 8), 128, policy="guided", guider=guider)
    assert g.dlm_passes == 4 and g.accepted == [32] * 4
    assert dlmfp.rule_match_rate(g.tokens, 8, 136) == 1.0
    print("guided   ", g)

    h = dlmfp.kv_similarity_heatmap(m, prompt, 10, layer=0, kind="V")
    assert len(h["matrix"]) == 10 and all(len(r) == 16 for r in h["matrix"])
    assert all(x == 1.0 for r in h["matrix"] for x in r[:6])
    print("heatmap   clean %.4f masked %.4f" % (h["clean_mean"], h["masked_mean"]))

    f = m.step_flops(32, mode="windowed", window=4)
    assert f["total"] == sum(v for k, v in f.items() if k != "total")
    print("flops    ", f["total"], m.memory(32, cache_present=True))

    try:
        dlmfp.decode(dlm, prompt, 8, policy="guided")
    except ValueError as e:
        print("error     ", e)
    else:
        raise AssertionError("guided decode without a guider succeeded")
    print("ok")


if __name__ == "__main__":
    main()
