import json
import os
import pytest
import torch

from vitdfq.checkpoint import (save_checkpoint, load_checkpoint, manifest_name, state_key, adapt_external_state_dict,
                               external_config)
from vitdfq.exceptions import CheckpointError


@pytest.fixture
def saved(tiny_model, tmp_path):
    return save_checkpoint(tiny_model, str(tmp_path / 'model' / 'manifest.json'))


def edit_manifest(path, fn):
    with open(path) as file:
        data = json.load(file)
    fn(data)
    with open(path, 'w') as file:
        json.dump(data, file)


def test_round_trip_is_bit_exact(tiny_model, saved, images):
    config, model = load_checkpoint(saved)
    assert config == tiny_model.config
    original = tiny_model.state_dict()
    for k, t in model.state_dict().items():
        assert torch.equal(t, original[k]), k
    assert torch.equal(model(images).logits, tiny_model(images).logits)


def test_manifest_lists_layer_names(saved):
    with open(saved) as file:
        tensors = json.load(file)['tensors']
    assert 'layer1.attn.proj.weight' in tensors
    assert 'layer2.mlp.fc2.bias' in tensors
    assert tensors['layer1.attn.qkv.weight']['shape'] == [24, 8]


def test_missing_projection(saved):
    edit_manifest(saved, lambda d: d['tensors'].pop('layer1.attn.proj.weight'))
    with pytest.raises(CheckpointError, match='layer1.attn.proj'):
        load_checkpoint(saved)


def test_shape_mismatch(saved):
    edit_manifest(saved, lambda d: d['tensors']['head.weight'].update(shape=[10, 9]))
    with pytest.raises(CheckpointError, match='head.weight'):
        load_checkpoint(saved)


def test_truncated_blob(saved):
    blob = os.path.join(os.path.dirname(saved), 'model.bin')
    size = os.path.getsize(blob)
    with open(blob, 'r+b') as file:
        file.truncate(size - 8)
    with pytest.raises(CheckpointError):
        load_checkpoint(saved)


def test_non_finite_values(saved):
    with open(saved) as file:
        offset = json.load(file)['tensors']['cls_token']['offset']
    blob = os.path.join(os.path.dirname(saved), 'model.bin')
    with open(blob, 'r+b') as file:
        file.seek(offset)
        file.write(b'\x00\x00\xc0\x7f')  # float32 NaN
    with pytest.raises(CheckpointError, match='cls_token'):
        load_checkpoint(saved)


def test_bad_format_and_missing_file(saved, tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path / 'nope.json'))
    edit_manifest(saved, lambda d: d.update(format='other'))
    with pytest.raises(CheckpointError):
        load_checkpoint(saved)


@pytest.mark.parametrize('edit', [
    lambda d: d.pop('blob'),
    lambda d: d.update(blob=None),
    lambda d: d.update(blob=''),
])
def test_missing_blob_entry(saved, edit):
    edit_manifest(saved, edit)
    with pytest.raises(CheckpointError, match='blob') as e:
        load_checkpoint(saved)
    assert e.value.tensor == 'blob'


@pytest.mark.parametrize('edit', [
    lambda d: d.pop('config'),
    lambda d: d.update(config=[1, 2]),
    lambda d: d.update(config='tiny'),
    lambda d: d['config'].update(depth=12),
    lambda d: d['config'].update(num_layers='two'),
    lambda d: d['config'].update(image_side=30),
    lambda d: d['config'].update(hidden_size=9),
])
def test_malformed_config(saved, edit):
    edit_manifest(saved, edit)
    with pytest.raises(CheckpointError, match='config') as e:
        load_checkpoint(saved)
    assert e.value.tensor == 'config'


def test_name_mapping():
    assert manifest_name('blocks.0.attn.proj.weight') == 'layer1.attn.proj.weight'
    assert manifest_name('head.bias') == 'head.bias'
    assert state_key('layer12.mlp.fc1.weight') == 'blocks.11.mlp.fc1.weight'


def test_external_adapter_drops_distillation(tiny_model):
    state = {k: v.clone() for k, v in tiny_model.state_dict().items()}
    pos = state['pos_embed']
    state['pos_embed'] = torch.cat([pos[:, :1], torch.zeros(1, 1, pos.shape[-1]), pos[:, 1:]], dim=1)
    state['dist_token'] = torch.zeros(1, 1, pos.shape[-1])
    state['head_dist.weight'] = torch.zeros(10, pos.shape[-1])
    state['head_dist.bias'] = torch.zeros(10)

    adapted = adapt_external_state_dict({'model': state}, tiny_model.config)
    assert 'dist_token' not in adapted and 'head_dist.weight' not in adapted
    assert torch.equal(adapted['pos_embed'], pos)
    tiny_model.load_state_dict(adapted, strict=True)


def test_external_config():
    config = external_config('deit_tiny_patch16_224')
    assert config.hidden_size == 192
    assert config.num_patches == 196
    with pytest.raises(CheckpointError):
        external_config('resnet50')
