"""
Checkpoint = manifest (JSON: config + tensor name -> shape, dtype, byte offset) + one little-endian float32 blob
"""
import os
import re
import json
import logging
import numpy as np
import torch

from .vit import ModelConfig, VisionTransformer
from .exceptions import CheckpointError, ConfigurationError

logger = logging.getLogger(__name__)

FORMAT = 'vitdfq-checkpoint'
VERSION = 1

# published DeiT weights, network-gated
EXTERNAL_MODELS = {
    'deit_tiny_patch16_224': ('https://dl.fbaipublicfiles.com/deit/deit_tiny_patch16_224-a1311bcf.pth', 3),
    'deit_small_patch16_224': ('https://dl.fbaipublicfiles.com/deit/deit_small_patch16_224-cd65a155.pth', 6),
    'deit_base_patch16_224': ('https://dl.fbaipublicfiles.com/deit/deit_base_patch16_224-b5f2ef4d.pth', 12),
}


class Manifest:
    def __init__(self, path):
        self.path = path
        self.data = self.read()

    def read(self):
        if not os.path.exists(self.path):
            raise CheckpointError('manifest', f"file not found: {self.path}")
        try:
            with open(self.path, 'r') as file:
                return json.load(file)
        except json.JSONDecodeError as e:
            raise CheckpointError('manifest', f"not valid JSON ({e})")

    @staticmethod
    def write(data, path):
        with open(path, 'w') as file:
            json.dump(data, file, indent=4)

    @property
    def blob_path(self):
        return os.path.join(os.path.dirname(os.path.abspath(self.path)), self.data['blob'])

    @property
    def tensors(self):
        return self.data.get('tensors', {})


def manifest_name(state_key):
    """ blocks.0.attn.proj.weight -> layer1.attn.proj.weight """
    m = re.match(r'blocks\.(\d+)\.(.*)', state_key)
    if m:
        return f"layer{int(m.group(1)) + 1}.{m.group(2)}"
    return state_key


def state_key(name):
    m = re.match(r'layer(\d+)\.(.*)', name)
    if m:
        return f"blocks.{int(m.group(1)) - 1}.{m.group(2)}"
    return name


def save_checkpoint(model: VisionTransformer, manifest_path, blob_name='model.bin'):
    folder = os.path.dirname(os.path.abspath(manifest_path))
    os.makedirs(folder, exist_ok=True)

    tensors = {}
    offset = 0
    with open(os.path.join(folder, blob_name), 'wb') as blob:
        for key, t in model.state_dict().items():
            arr = t.detach().cpu().numpy().astype('<f4')
            blob.write(arr.tobytes())
            tensors[manifest_name(key)] = {'shape': list(arr.shape), 'dtype': 'float32', 'offset': offset}
            offset += arr.nbytes

    data = {'format': FORMAT, 'version': VERSION, 'config': model.config.to_dict(), 'blob': blob_name,
            'tensors': tensors}
    Manifest.write(data, manifest_path)
    logger.info(f"saved checkpoint with {len(tensors)} tensors to {manifest_path}")
    return manifest_path


def load_checkpoint(manifest_path):
    """
    :param manifest_path:   path to manifest.json
    :return:                (ModelConfig, VisionTransformer holding the validated parameter set)
    """
    manifest = Manifest(manifest_path)
    if manifest.data.get('format') != FORMAT:
        raise CheckpointError('manifest', f"unknown format {manifest.data.get('format')!r}")
    if 'config' not in manifest.data:
        raise CheckpointError('config', 'missing from manifest')
    try:
        config = ModelConfig.from_dict(manifest.data['config'])
    except (TypeError, ValueError, ConfigurationError) as e:
        raise CheckpointError('config', f"malformed ({e})")
    model = VisionTransformer(config, init_weights=False)

    if not isinstance(manifest.data.get('blob'), str) or not manifest.data['blob']:
        raise CheckpointError('blob', 'missing from manifest')
    if not os.path.exists(manifest.blob_path):
        raise CheckpointError('blob', f"file not found: {manifest.blob_path}")
    with open(manifest.blob_path, 'rb') as file:
        buf = file.read()

    state = {}
    expected = model.state_dict()
    for key, ref in expected.items():
        name = manifest_name(key)
        if name not in manifest.tensors:
            raise CheckpointError(name, 'missing from manifest')
        entry = manifest.tensors[name]
        shape = tuple(entry.get('shape', ()))
        if shape != tuple(ref.shape):
            raise CheckpointError(name, f"shape {shape} does not match expected {tuple(ref.shape)}")
        if entry.get('dtype') != 'float32':
            raise CheckpointError(name, f"dtype {entry.get('dtype')!r} is not float32")
        count = int(np.prod(shape, dtype=np.int64))
        offset = int(entry.get('offset', -1))
        if offset < 0 or offset + 4 * count > len(buf):
            raise CheckpointError(name, 'blob is truncated or offset is out of range')
        arr = np.frombuffer(buf, dtype='<f4', count=count, offset=offset).reshape(shape)
        if not np.isfinite(arr).all():
            raise CheckpointError(name, 'non-finite values in blob')
        state[key] = torch.from_numpy(arr.astype(np.float32))

    extra = sorted(set(manifest.tensors) - {manifest_name(k) for k in expected})
    if extra:
        logger.warning(f"ignoring unexpected tensors in manifest: {extra}")

    model.load_state_dict(state)
    model.loaded = True
    return config, model


def external_config(name, num_classes=1000):
    if name not in EXTERNAL_MODELS:
        raise CheckpointError(name, f"unknown external model, known: {sorted(EXTERNAL_MODELS)}")
    heads = EXTERNAL_MODELS[name][1]
    return ModelConfig(num_layers=12, num_heads=heads, head_dim=64, patch_size=16, image_side=224,
                       num_classes=num_classes)


def adapt_external_state_dict(state_dict, config: ModelConfig):
    """
    Map published ViT/DeiT naming onto ours. Distillation token and head are dropped, the
    positional row that belonged to the distillation token too.
    """
    if 'model' in state_dict and isinstance(state_dict['model'], dict):
        state_dict = state_dict['model']

    out = {}
    for key, t in state_dict.items():
        if key.startswith('dist_token') or key.startswith('head_dist'):
            continue
        out[key] = t

    n_tokens = config.num_patches + 1
    pos = out.get('pos_embed')
    if pos is not None and pos.shape[1] == n_tokens + 1:
        out['pos_embed'] = torch.cat([pos[:, :1], pos[:, 2:]], dim=1)
    return out


def fetch_external(name, manifest_path):
    """ Download a published checkpoint and store it in manifest format (needs network) """
    config = external_config(name)
    url = EXTERNAL_MODELS[name][0]
    logger.info(f"downloading {name} from {url}")
    state = torch.hub.load_state_dict_from_url(url, map_location='cpu', check_hash=False)
    state = adapt_external_state_dict(state, config)

    model = VisionTransformer(config, init_weights=False)
    try:
        missing, unexpected = model.load_state_dict(state, strict=False)
    except RuntimeError as e:
        raise CheckpointError(name, f"does not fit {config.num_layers} layers x {config.num_heads} heads ({e})")
    if missing:
        raise CheckpointError(manifest_name(missing[0]), f"missing after adaptation of {name}")
    if unexpected:
        logger.warning(f"{name}: unused tensors {unexpected}")
    model.loaded = True
    return save_checkpoint(model, manifest_path)
