"""Independent reference implementations used by several test modules."""

import numpy as np
import torch
import torch.nn as nn

from stroketriage.backbones import Backbone, BackboneConfig


def brute_force_metrics(preds, labels, num_classes=3):
    """Per-sample tallies with plain Python loops; 0/0 counts as 0."""
    n = len(labels)
    correct = sum(1 for p, t in zip(preds, labels) if p == t)
    per_class = []
    for c in range(num_classes):
        tp = sum(1 for p, t in zip(preds, labels) if p == c and t == c)
        fp = sum(1 for p, t in zip(preds, labels) if p == c and t != c)
        fn = sum(1 for p, t in zip(preds, labels) if p != c and t == c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        per_class.append((prec, rec, f1))
    macro = tuple(sum(v[i] for v in per_class) / num_classes for i in range(3))
    return correct / n, per_class, macro


def brute_force_cm(preds, labels, num_classes=3):
    cm = [[0] * num_classes for _ in range(num_classes)]
    for p, t in zip(preds, labels):
        cm[t][p] += 1
    return np.array(cm)


def central_difference(f, x, eps=1e-5):
    """Numerical gradient of scalar ``f`` w.r.t. float64 tensor ``x`` (modified in place, restored)."""
    g = torch.zeros_like(x)
    flat = x.view(-1)
    gflat = g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            fp = float(f())
            flat[i] = old - eps
            fm = float(f())
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


class OracleNet(Backbone):
    """Class 0 score = spatial mean of channel 0 of a conv feature map (class 1 = minus that)."""

    def __init__(self, stride=1, positive=False, seed=0):
        super().__init__(BackboneConfig(arch="vit", image_side=16, patch_size=8))
        torch.manual_seed(seed)
        self.conv = nn.Conv2d(3, 4, 3, stride=stride, padding=1).double()
        if positive:
            with torch.no_grad():
                self.conv.weight.abs_()
                self.conv.bias.fill_(1.0)
        self.tap = self._tap("feat")
        self.vec = self._tap("pooled", "vector")
        self.feature_dim = 4
        self.head = nn.Linear(4, 2).double()
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()
            self.head.weight[0, 0] = 1.0
            self.head.weight[1, 0] = -1.0

    def forward_features(self, x):
        return self.vec(self.tap(self.conv(x)).mean(dim=(2, 3)))


def oracle_map(net, img):
    a0 = torch.relu(net.conv(img[None])[0, 0]).detach().numpy()
    return (a0 - a0.min()) / (a0.max() - a0.min())
