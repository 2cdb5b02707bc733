"""Central finite-difference oracle for the masked-LM loss (independent of autograd)."""

import torch

from lexbridge.model import mlm_loss


def numeric_grads(model, batch, h=1e-6):
    model.eval()
    grads = {}
    with torch.no_grad():
        def loss():
            return mlm_loss(model(batch.input_ids, batch.attention_mask), batch.labels).item()

        for name, p in model.named_parameters():
            flat = p.view(-1)
            g = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss()
                flat[i] = orig - h
                down = loss()
                flat[i] = orig
                g[i] = (up - down) / (2 * h)
            grads[name] = g.view_as(p)
    return grads


def relative_error(a, b):
    denom = max(a.norm().item() + b.norm().item(), 1e-6)
    return (a - b).norm().item() / denom
