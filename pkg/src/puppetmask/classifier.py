"""Universal targeted attack on a small image classifier.

Synthetic 3-class shape images (square / disk / cross) stand in for a
real photo dataset: the same mask optimizer that steers policies is
pointed at a conv classifier, producing one additive mask that drives
any image toward a chosen label.  A small training split (80 images by
default) is optimized against; success is measured on the held-out
rest.
"""

import numpy as np

from . import tensor as T
from .attacks import RAW_PER_UNIT, optimize_mask
from .policy import ConvNet

N_CLASSES = 3


def make_shapes_dataset(n, seed=0, hw=42):
    """Random (n,1,hw,hw) raw images in [0,255] and labels in {0,1,2}."""
    rng = np.random.default_rng(seed)
    images = np.zeros((n, 1, hw, hw), np.float32)
    labels = np.zeros(n, np.int64)
    yy, xx = np.mgrid[0:hw, 0:hw]
    for i in range(n):
        label = int(rng.integers(N_CLASSES))
        size = int(rng.integers(6, 13))
        cy = int(rng.integers(size, hw - size))
        cx = int(rng.integers(size, hw - size))
        value = float(rng.uniform(140, 255))
        canvas = rng.uniform(0, 25, size=(hw, hw)).astype(np.float32)
        if label == 0:  # filled square
            canvas[cy - size : cy + size, cx - size : cx + size] = value
        elif label == 1:  # disk
            canvas[(yy - cy) ** 2 + (xx - cx) ** 2 <= size**2] = value
        else:  # cross
            arm = max(2, size // 3)
            canvas[cy - size : cy + size, cx - arm : cx + arm] = value
            canvas[cy - arm : cy + arm, cx - size : cx + size] = value
        images[i, 0] = canvas
        labels[i] = label
    return images, labels


def build_classifier(seed=0, hw=42, n_classes=N_CLASSES):
    return ConvNet(n_classes, in_channels=1, in_hw=hw, seed=seed)


def train_classifier(images, labels, steps=600, batch_size=32, lr=1e-3, seed=0):
    """Cross-entropy training of the small conv classifier."""
    net = build_classifier(seed=seed, hw=images.shape[-1])
    adam = T.Adam(net.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    for step in range(steps):
        idx = rng.integers(len(images), size=batch_size)
        logits = net.logits(images[idx])
        loss = T.scale(T.mean(T.take_per_row(T.log_softmax(logits), labels[idx])), -1.0)
        if not np.isfinite(loss.item()):
            raise RuntimeError(f"classifier training diverged at step {step}")
        net.zero_grad()
        loss.backward()
        adam.step()
    return net


def classifier_accuracy(net, images, labels):
    with T.no_grad():
        pred = net.logits_array(images).argmax(axis=1)
    return float((pred == labels).mean())


def targeted_success(net, images, mask, target_label):
    """Rate at which masked images are classified as the target label."""
    attacked = np.clip(images + RAW_PER_UNIT * mask, 0.0, 255.0).astype(np.float32)
    with T.no_grad():
        pred = net.logits_array(attacked).argmax(axis=1)
    return float((pred == target_label).mean())


def craft_universal_classifier(
    net, images, target_label, budget, seed=0, train_count=80, temperature=1.0
):
    """Single universal mask steering the classifier to ``target_label``.

    Splits off ``train_count`` images for optimization and reports
    targeted accuracy on both splits.  Returns (mask, report).
    """
    if len(images) == 0:
        raise ValueError("craft_universal_classifier: no images")
    if not 0 <= target_label < net.action_count:
        raise ValueError(f"invalid target label {target_label}")
    if not 1 <= train_count <= len(images):
        raise ValueError(f"train_count must be in [1, {len(images)}]")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(images))
    train_idx, test_idx = order[:train_count], order[train_count:]
    train_images = images[train_idx]

    def get_batch(indices, _history_rng):
        return train_images[indices]

    mask, history = optimize_mask(
        [net],
        get_batch,
        len(train_images),
        target_label,
        budget,
        np.random.SeedSequence((int(seed), int(target_label))),
        images.shape[2:],
        temperature=temperature,
    )
    report = {
        "target_label": int(target_label),
        "epsilon": budget.epsilon,
        "alpha": budget.alpha,
        "epochs": budget.epochs,
        "train_count": int(train_count),
        "test_count": int(len(test_idx)),
        "train_accuracy": targeted_success(net, train_images, mask, target_label),
        "test_accuracy": (
            targeted_success(net, images[test_idx], mask, target_label)
            if len(test_idx)
            else float("nan")
        ),
        "base_rate_test": (
            float(
                (
                    net.logits_array(images[test_idx]).argmax(axis=1) == target_label
                ).mean()
            )
            if len(test_idx)
            else float("nan")
        ),
        "objective_history": history,
    }
    return mask, report
