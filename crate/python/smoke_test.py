"""Smoke test for the dse_py extension module.

Build and install first, e.g. `pip install --no-build-isolation ./crates/py`
(needs maturin), then run `python python/smoke_test.py`.
"""

import json
import os
import tempfile

import dse_py


def main():
    graphs = dse_py.generate_tr3(num_graphs=90, seed=3)
    assert len(graphs) == 90
    g = graphs[0]
    assert g.ground_truth, "TR3 graphs carry their motif edges"
    print(g)

    model = dse_py.Predictor.train(graphs, max_epochs=5, hidden_dim=16)
    probs = model.forward(g)
    assert abs(sum(probs) - 1.0) < 1e-9
    print("test accuracy", model.test_accuracy)

    selected = dse_py.explain(model, g, "occlusion", ratio=0.3)
    assert set(selected) <= set(g.edges)

    gen = dse_py.Generator.train(graphs[:30], max_epochs=1, encode_dim=8)
    surrogate = gen.sample(g, selected, seed=1)
    assert set(selected) <= set(surrogate)

    imp_re, imp_dse, deletion = dse_py.importance(model, g, selected, generator=gen, num_surrogates=5)
    for v in (imp_re, imp_dse):
        assert 0.0 <= v <= 1.0
    print("imp_re %.3f imp_dse %.3f deletion %.3f" % (imp_re, imp_dse, deletion))

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.ckpt")
        model.save(path)
        assert dse_py.Predictor.load(path).forward(g) == probs
        data = os.path.join(tmp, "data.bin")
        dse_py.save_dataset(graphs, data)
        assert [h.edges for h in dse_py.load_dataset(data)] == [h.edges for h in graphs]
        try:
            dse_py.Predictor.load(os.path.join(tmp, "absent.ckpt"))
        except (dse_py.DseError, OSError) as e:
            print("missing checkpoint:", e)
        else:
            raise AssertionError("loading a missing checkpoint should fail")

        config = os.path.join(tmp, "tiny.toml")
        with open(config, "w") as f:
            f.write(
                "out_dir = 'run'\n"
                "[data]\neval_graphs = 4\n[data.tr3]\nnum_graphs = 30\n"
                "[predictor]\nhidden_dim = 8\nmax_epochs = 2\n"
                "[generator]\nseeds = [0]\nablations = false\nvgae_baseline = false\n"
                "fid_masks = 1\nmetric_graphs = 3\nencode_dim = 4\ncritic_dim = 4\nmax_epochs = 1\n"
                "[explainers]\nmaskopt_steps = 3\n[dse]\nnum_surrogates = 2\n"
            )
        report = json.loads(dse_py.run_experiment(config))
        assert len(report["explainers"]) == 6
        assert os.path.exists(os.path.join(tmp, "run", "report.json"))
    print("smoke test passed")


if __name__ == "__main__":
    main()
