import hashlib
import random
import numpy as np
import torch
from typing import Union


def set_seed(seed: int):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def torch_generator(seed: int):
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def state_digest(module: Union[torch.nn.Module, dict]):
    """
    sha256 over every tensor of a module (or state dict) in name order

    :param module:  nn.Module or mapping name -> tensor
    :return:        hex digest
    """
    state = module.state_dict() if isinstance(module, torch.nn.Module) else module
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def rescale_to_unit(images: Union[torch.Tensor, np.ndarray]):
    """ Affine per-image rescale of [B, C, H, W] to [0, 1]; constant images map to 0 """
    x = images.detach().cpu().numpy() if isinstance(images, torch.Tensor) else np.asarray(images)
    lo = x.min(axis=(1, 2, 3), keepdims=True)
    hi = x.max(axis=(1, 2, 3), keepdims=True)
    span = np.where(hi - lo > 0, hi - lo, 1)
    return (x - lo) / span


def batches(n, batch_size):
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))
