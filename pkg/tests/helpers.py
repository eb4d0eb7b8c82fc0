"""Shared builders and an independent cross-entropy training loop."""

import numpy as np

from divkd import branch_net, data, ffm, losses
from divkd.losses import Coefficients
from divkd.tensor import Tensor
from divkd.trainer import Schedule, Trainer

# (criterion number, passed, detail) rows reported by conftest at session end
ACCEPTANCE = []


def report(num, ok, detail):
    ACCEPTANCE.append((num, bool(ok), detail))
    print(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


def tiny_config(classes=4, m=4, size=8):
    return branch_net.small_vgg(classes, m, widths=(4, 6, 6, 8), convs=1, pools=(True, False, True, False),
                                image_size=size)


def tiny_data(classes=4, per_class=12, size=8, seed=0):
    return data.synthetic_dataset(classes, per_class, image_size=size, margin=1.0, jitter=1, test_per_class=5,
                                  seed=seed)


def tiny_trainer(coeffs=Coefficients(), *, seed=0, mech="ffm", epochs=10, classes=4, batch_size=16, **kw):
    cfg = tiny_config(classes)
    net = branch_net.build(cfg, seed)
    mechanism = ffm.build_mechanism(mech, cfg, np.random.default_rng([seed, 1]))
    return Trainer(net, mechanism, Schedule(0.05, (epochs // 2,), 0.1, epochs), coeffs, batch_size=batch_size,
                   shuffle_seed=seed, pad=1, **kw)


def reference_ce_training(net, ds, *, epochs, lr_fn, batch_size, shuffle_seed, pad, momentum=0.9, wd=5e-4):
    """Plain per-branch cross-entropy training with Nesterov SGD written out
    longhand; shares only the forward pass with the library trainer."""
    shuffle_rng, augment_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(shuffle_seed).spawn(2))
    params = list(net.named_parameters())
    velocity = {}
    for epoch in range(epochs):
        lr = lr_fn(epoch)
        net.train()
        for idx in data.batch_indices(len(ds), batch_size, shuffle_rng):
            x = data.augment(ds.images[idx], augment_rng, pad)
            y = ds.labels[idx]
            for _, p in params:
                p.grad = None
            out = net(Tensor(x))
            loss = None
            for t in out.logits:
                term = losses.cross_entropy_logits(t, y)
                loss = term if loss is None else loss + term
            loss.backward()
            for name, p in params:
                g = p.grad + wd * p.data if name.endswith(".weight") else p.grad
                v = g.copy() if name not in velocity else momentum * velocity[name] + g
                velocity[name] = v
                p.data -= lr * (g + momentum * v)
    return net
