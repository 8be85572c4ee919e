import numpy as np
import pytest

from gradcheck import check_network, numeric_grad, rel_err, relu_margin
from pimtl import model, synth
from pimtl.dynamics import MomentArms, WristDynamicsParams
from pimtl.model import ContiguityError, PhysicsSegment, SegmentLengthError
from pimtl.sigproc import WindowBatch

DYN = WristDynamicsParams()
ARMS = MomentArms()


def tiny(norm="batch", seed=0):
    cfg = model.ModelConfig(conv_channels=3, hidden=5, dropout=0.5, conv_norm="window",
                            dense_norm=norm)
    net = model.build_picnn(cfg, seed)
    # zero biases put the all-padding conv outputs exactly on the ReLU kink
    rng = np.random.default_rng(seed)
    for p in net.params():
        if p.name.endswith(".bias"):
            p.value = rng.normal(0, 0.5, p.value.shape)
    return net


def test_build_shapes_and_groups():
    net = model.build_picnn()
    y = model.forward(net, np.random.default_rng(0).normal(size=(5, 6, 16)), train=True)
    assert y.shape == (5, 6)
    feat = {b.name for b in net.group(model.FEATURE_GROUP).blocks}
    subj = {b.name for b in net.group(model.SUBJECT_GROUP).blocks}
    assert feat == {"conv1", "conv2"} and subj == {"dense1", "dense2", "head"}


def test_build_is_seeded():
    a, b = model.build_picnn(seed=4), model.build_picnn(seed=4)
    assert all(np.array_equal(p.value, q.value) for p, q in zip(a.params(), b.params()))


def test_forward_rejects_wrong_channels():
    with pytest.raises(Exception):
        model.forward(model.build_picnn(), np.zeros((2, 5, 16)))


def test_data_loss_hand_value():
    pred = np.zeros((2, 3))
    target = np.array([[1.0, 2.0, 1.0], [1.0, 0.0, 3.0]])
    loss, grad, per = model.mse_data_loss(pred, target)
    # (1 + 1) / 2 + (4 + 0) / 2 + (1 + 9) / 2
    assert loss == pytest.approx(8.0)
    assert per.tolist() == [1.0, 2.0, 5.0]
    assert np.allclose(grad, -target)


def test_fd_derivatives_on_quadratic():
    dt = 0.01
    t = np.arange(7) * dt
    td, tdd = model.fd_derivatives(3 * t ** 2 + t, dt)
    assert np.allclose(td, 6 * t[1:-1] + 1) and np.allclose(tdd, 6.0)


def test_short_segment_rejected():
    with pytest.raises(SegmentLengthError):
        PhysicsSegment(np.zeros(2), np.zeros((2, 5)), 1e-3)


def test_physics_loss_zero_on_consistent_trajectory():
    # theta = 0.1 sin(t) with the torque that makes it exact for the FD stencil
    dt = 1e-3
    th = 0.1 * np.sin(np.arange(5) * dt)
    td, tdd = model.fd_derivatives(th, dt)
    tau = DYN.inertia * tdd + DYN.damping * td + DYN.mass * DYN.gravity * DYN.com_length * np.sin(th[1:-1])
    F = np.zeros((5, 5))
    F[1:-1, 0] = tau / ARMS.as_array()[0]
    assert model.physics_loss(PhysicsSegment(th, F, dt), DYN, ARMS) == pytest.approx(0, abs=1e-24)


def test_physics_loss_gradient():
    rng = np.random.default_rng(1)
    seg = PhysicsSegment(rng.normal(0, 0.3, 5), rng.uniform(0, 5, (5, 5)), 1e-2)
    _, dth, dF = model.physics_loss(seg, DYN, ARMS, with_grad=True)

    def f():
        return model.physics_loss(seg, DYN, ARMS)

    assert rel_err(dth, numeric_grad(f, seg.theta)) < 1e-6
    assert rel_err(dF, numeric_grad(f, seg.forces)) < 1e-6


def test_physics_loss_on_simulated_trial():
    s = synth.sample_subject(synth.PopulationConfig(), 0, 5)
    tr = synth.simulate_trial(s, synth.ExcitationProfile(), 1000.0)
    losses = [model.physics_loss(PhysicsSegment(tr.angle[i:i + 5], tr.forces[i:i + 5], 1e-3),
                                 s.dyn, s.arms) for i in range(0, 1990, 7)]
    assert max(losses) <= 1e-6


def batch_of(n_seg=2, S=5, contiguous=True, seed=0):
    rng = np.random.default_rng(seed)
    B = n_seg * S
    idx = np.concatenate([np.arange(k * 50, k * 50 + S) for k in range(n_seg)])
    if not contiguous:
        idx = idx * 2
    targets = np.concatenate([rng.uniform(0, 5, (B, 5)), rng.normal(0, 0.3, (B, 1))], axis=1)
    return WindowBatch(rng.normal(size=(B, 6, 16)), targets, 1e-3, contiguous, idx)


def test_composite_identity_and_zero_lambda():
    rng = np.random.default_rng(2)
    b = batch_of()
    pred = b.targets + rng.normal(0, 0.1, b.targets.shape)
    bd, _ = model.composite_loss(pred, b.targets, b.dt, b.index, DYN, ARMS, lam=0.7)
    assert bd.total == pytest.approx(bd.l_data + 0.7 * bd.l_phys, rel=1e-15)
    assert bd.l_phys > 0
    bd0, g0 = model.composite_loss(pred, b.targets, b.dt, b.index, DYN, ARMS, lam=0.0)
    _, gd, _ = model.mse_data_loss(pred, b.targets)
    assert bd0.total == bd0.l_data == pytest.approx(bd.l_data)
    assert np.array_equal(g0, gd)


def test_contiguity_enforced():
    b = batch_of(contiguous=False)
    with pytest.raises(ContiguityError):
        model.composite_loss(b.targets, b.targets, b.dt, b.index, DYN, ARMS, lam=1.0)
    with pytest.raises(ContiguityError):
        model.total_loss_and_grad(tiny(), b, DYN, ARMS, lam=1.0)
    with pytest.raises(ContiguityError):
        model.check_contiguous(np.arange(7), 5)


@pytest.mark.parametrize("lam", [0.0, 1.0])
@pytest.mark.parametrize("norm", ["batch", "running"])
def test_end_to_end_gradient(lam, norm):
    seed = 3
    while True:
        net, b = tiny(norm, seed=seed), batch_of(seed=seed + 1)
        if relu_margin(net, b.inputs) > 1e-2:
            break
        seed += 2
    if norm == "running":
        for _ in range(3):
            net.forward(b.inputs, True)
        net.set_update_stats(False)

    def loss_fn(pred):
        bd, d = model.composite_loss(pred, b.targets, b.dt, b.index, DYN, ARMS, lam)
        return bd.total, d

    assert check_network(net, b.inputs, loss_fn) < 1e-4


def test_total_loss_and_grad_matches_composite():
    net = tiny(seed=5)
    b = batch_of(seed=6)
    state = net.rng.bit_generator.state
    bd, grads = model.total_loss_and_grad(net, b, DYN, ARMS, lam=1.0)
    net.reseed(state)
    pred = model.forward(net, b.inputs, train=True)
    ref, _ = model.composite_loss(pred, b.targets, b.dt, b.index, DYN, ARMS, 1.0)
    assert bd.total == pytest.approx(ref.total, rel=1e-12)
    assert set(grads) == set(net.named_params())


def test_load_checkpoint_rebuilds(tmp_path):
    from pimtl import nnet
    net = tiny(seed=7)
    net.forward(batch_of().inputs, True)
    nnet.save_checkpoint(tmp_path / "m.ckpt", net)
    net2 = model.load_checkpoint(tmp_path / "m.ckpt")
    x = batch_of(seed=8).inputs
    assert np.array_equal(model.predict(net, x), model.predict(net2, x))
