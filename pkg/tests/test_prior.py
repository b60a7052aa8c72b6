import numpy as np
import pytest
from sklearn.base import clone

from posepair import neural
from posepair.body import generate_corpus, human_fk, identity_pose, sample_uniform_rom
from posepair.prior import (
    IKConfig,
    PosePrior,
    _vae_loss_and_grads,
    ik_objective,
    ik_solve,
    ik_solve_batch,
    kl_divergence,
    pose_error,
    vae_objective,
)

from .gradcheck import central_fd, rel_error


def test_pose_error_definition():
    H = np.zeros((1, 12))
    Ht = np.zeros((1, 12))
    Ht[0, 0] = 0.3  # joint 0: squared diff 0.09, joint 1: 0
    assert pose_error(H, Ht)[0] == pytest.approx(0.045, abs=1e-15)


def test_kl_zero_at_standard_normal():
    assert kl_divergence(np.zeros((2, 4)), np.zeros((2, 4))) == pytest.approx([0.0, 0.0])
    # closed form for one dim: 0.5 (mu^2 + s^2 - 1 - ln s^2)
    assert kl_divergence(np.array([[1.0]]), np.array([[np.log(4.0)]]))[0] == pytest.approx(0.5 * (1 + 4 - 1 - np.log(4)))


def test_vae_gradients_match_fd():
    rng = np.random.default_rng(0)
    enc = neural.init_weights((12, 10, 6), 1)
    dec = neural.init_weights((3, 10, 12), 2)
    X, eps = rng.normal(size=(5, 12)), rng.normal(size=(5, 3))
    _, _, ge, gd = _vae_loss_and_grads(enc, dec, X, eps, beta=0.3)
    f = lambda: vae_objective(enc, dec, X, eps, 0.3)  # noqa: E731
    for net, grads in ((enc, ge), (dec, gd)):
        for name, p in net.params().items():
            assert rel_error(grads[name], central_fd(f, p)) < 1e-6, name


def test_fit_api_and_reconstruction(small_prior, body):
    p = small_prior
    assert p.n_features_in_ == 6 * body.k and p.n_joints == body.k
    assert 1 <= p.best_epoch_ <= 8 and len(p.history_) == 8
    X = generate_corpus(body, 6, 8, seed=9).reshape(6, -1)
    assert p.transform(X).shape == (6, 8)
    rec = p.reconstruct(X)
    # reconstructions are valid rotations (canonical 6D)
    from posepair.rotations import canonicalize_sixd

    assert np.allclose(canonicalize_sixd(rec.reshape(6, -1, 6)).reshape(6, -1), rec, atol=1e-12)
    phi = p.reconstruction_error(X)
    assert phi.shape == (6,) and np.all(phi >= 0)
    assert np.allclose(phi, pose_error(X, rec), atol=1e-12)


def test_get_params_and_clone(small_prior):
    c = clone(small_prior)
    assert c.get_params() == small_prior.get_params()
    assert not hasattr(c, "encoder_")


def test_fit_rejects_bad_input(body):
    with pytest.raises(ValueError):
        PosePrior(latent_dim=32).fit(np.zeros((50, 6 * body.k)))
    X = generate_corpus(body, 400, 8, 0).reshape(400, -1)
    X[3, 5] = np.nan
    with pytest.raises(ValueError):
        PosePrior(latent_dim=4, hidden_dim=8, epochs=1).fit(X)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_fit_aborts(body):
    X = generate_corpus(body, 400, 8, 0).reshape(400, -1) * 1e150
    with pytest.raises(FloatingPointError):
        PosePrior(latent_dim=4, hidden_dim=8, epochs=2, learning_rate=1.0).fit(X)


def test_fit_is_deterministic(body):
    X = generate_corpus(body, 400, 8, 0).reshape(400, -1)
    a = PosePrior(latent_dim=4, hidden_dim=16, epochs=2, random_state=3).fit(X)
    b = PosePrior(latent_dim=4, hidden_dim=16, epochs=2, random_state=3).fit(X)
    assert a.checksum == b.checksum


def test_save_load_round_trip(small_prior, tmp_path, body):
    path = tmp_path / "prior.json"
    sha = small_prior.save(path)
    back = PosePrior.load(path)
    assert back.checksum == sha == small_prior.checksum
    X = sample_uniform_rom(body, 3, 0).reshape(3, -1)
    assert np.array_equal(back.reconstruction_error(X), small_prior.reconstruction_error(X))
    text = path.read_text().replace('"beta":0.005', '"beta":0.006')
    path.write_text(text)
    with pytest.raises(ValueError, match="hash"):
        PosePrior.load(path)


def _arm_targets(body, H):
    joints = [body.joint_index(n) for n in ("right_shoulder", "right_elbow", "right_wrist")]
    return joints, human_fk(body, H)[:, joints]


def test_ik_objective_matches_reference(small_prior, body):
    joints, T = _arm_targets(body, generate_corpus(body, 3, 8, 77))
    cfg = IKConfig(max_iters=15)
    res = ik_solve_batch(small_prior, body, joints, T, np.array([1.0, 2.0, 0.5]), cfg)
    for r, t in zip(res, T):
        ref = ik_objective(small_prior, body, joints, t, [1.0, 2.0, 0.5], r.z, cfg.latent_reg)
        assert r.objective == pytest.approx(ref, rel=1e-10)
        assert r.objective <= r.initial_objective
        assert r.iterations <= cfg.max_iters


def test_ik_gradient_modes_agree(small_prior, body):
    joints, T = _arm_targets(body, generate_corpus(body, 2, 8, 5))
    a = ik_solve_batch(small_prior, body, joints, T, None, IKConfig(max_iters=10, gradient="output"))
    b = ik_solve_batch(small_prior, body, joints, T, None, IKConfig(max_iters=10, gradient="latent"))
    for ra, rb in zip(a, b):
        assert np.allclose(ra.z, rb.z, atol=1e-6)
    with pytest.raises(ValueError):
        ik_solve_batch(small_prior, body, joints, T, None, IKConfig(gradient="nope"))


def test_ik_batch_equals_single(small_prior, body):
    joints, T = _arm_targets(body, generate_corpus(body, 3, 8, 11))
    cfg = IKConfig(max_iters=12)
    batch = ik_solve_batch(small_prior, body, joints, T, None, cfg)
    one = ik_solve(small_prior, body, [(j, p) for j, p in zip(["right_shoulder", "right_elbow", "right_wrist"], T[1])], cfg)
    assert np.allclose(batch[1].z, one.z, atol=1e-9)


def test_ik_rest_targets_start_close(small_prior, body):
    # z = 0 decodes near the corpus mean, so rest-pose targets are not far off
    joints, T = _arm_targets(body, identity_pose(body)[None])
    res = ik_solve_batch(small_prior, body, joints, T, None, IKConfig(max_iters=0))[0]
    assert res.iterations == 0 and np.array_equal(res.z, np.zeros(small_prior.latent_dim))
    with pytest.raises(ValueError):
        ik_solve(small_prior, body, [])
