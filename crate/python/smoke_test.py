"""End-to-end smoke test of the sgmlmoe_py extension module."""

import json
import math
import os
import tempfile

import sgmlmoe_py as sm


def main():
    truth = sm.benchmark_truth()
    assert truth.shape == (2, 2, 1, 1)
    back = sm.Theta.from_json(truth.to_json())
    assert back.to_flat() == truth.to_flat()

    data = sm.sample_dataset(truth, 2000, 5)
    assert len(data) == 2000 and data.n_classes == 2

    probs = truth.predict_proba([0.3])
    assert abs(sum(probs) - 1.0) < 1e-12

    init = sm.init_perturbed_truth(truth, 0.5, 2, 1)
    fitted, trace = sm.fit_mm(init, data, max_iters=300)
    ll = trace["loglik"]
    assert all(b >= a - 1e-9 for a, b in zip(ll, ll[1:])), "log-likelihood decreased"
    assert math.isclose(ll[-1], fitted.log_likelihood(data), rel_tol=1e-12)

    chain = sm.build_chain(fitted, data)
    assert [len(level["atoms"]) for level in chain["levels"]] == [4, 3, 2]
    report = sm.select_dsc(fitted, data)
    print("DSC chose K =", report["chosen_k"], "scores", report["scores"])

    fits = [sm.fit_mm(sm.init_from_clustering(data, k, 1, 3), data, max_iters=100)[0] for k in (1, 2, 3)]
    bic = sm.select_criterion(fits, data, "bic")
    print("BIC chose K =", bic["chosen_k"])

    loss = sm.voronoi_loss(fitted, truth)
    assert loss["d_v"] >= loss["d_e"] >= 0

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "data.csv")
        data.to_csv(path)
        again = sm.Dataset.from_csv(path)
        assert again.labels == data.labels
        measure = fitted.mixing_measure()
        chain2 = sm.build_chain(json.loads(json.dumps(measure)), again)
        assert chain2["heights"] == chain["heights"]

    try:
        sm.Dataset([[0.0], [1.0]], [1, 3], 2)
    except ValueError:
        pass
    else:
        raise AssertionError("out-of-range label accepted")
    print("smoke test passed")


if __name__ == "__main__":
    main()
