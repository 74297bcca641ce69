import pytest

from src.builtin_nodes import ENTRYPOINTS
from src.errors import ConflictError, ConstraintError, NotFoundError
from src.node_registry import NodeRegistry


def manifest(**changes):
    document = {
        'node_id': 'clip_values', 'version': '1.0.0', 'entrypoint': 'builtin.threshold_flag',
        'description': 'clip a column',
        'input_ports': [{'name': 'table', 'kind': 'table'}],
        'output_ports': [{'name': 'table', 'kind': 'table'}],
        'parameters': [{'name': 'limit', 'kind': 'float', 'default': 1.0}],
    }
    document.update(changes)
    return document


@pytest.fixture
def registry(tmp_path):
    return NodeRegistry(tmp_path / 'nodes', entrypoints=ENTRYPOINTS)


def test_register_is_idempotent_and_persistent(registry, tmp_path):
    assert registry.register_node(manifest()) == 'registered'
    assert registry.register_node(manifest()) == 'unchanged'
    reopened = NodeRegistry(tmp_path / 'nodes', entrypoints=ENTRYPOINTS)
    assert reopened.get('clip_values@1.0.0').parameter('limit').default == 1.0


def test_same_version_with_other_content_conflicts(registry):
    registry.register_node(manifest())
    with pytest.raises(ConflictError):
        registry.register_node(manifest(description='clip harder'))
    assert registry.register_node(manifest(version='1.1.0', description='clip harder')) == 'registered'


@pytest.mark.parametrize('changes', [
    {'node_id': 'Clip Values'},
    {'version': 'one'},
    {'entrypoint': 'plugins.unbound'},
    {'input_ports': [{'name': 'table', 'kind': 'table'}, {'name': 'table', 'kind': 'table'}]},
    {'parameters': [{'name': 'limit', 'kind': 'float', 'default': 'high'}]},
    {'input_ports': [{'name': 'table', 'kind': 'video'}]},
])
def test_invalid_manifests(registry, changes):
    with pytest.raises(ConstraintError) as exc:
        registry.register_node(manifest(**changes))
    assert exc.value.code == 'INVALID_MANIFEST'


def test_logic_can_be_bound_at_registration(registry):
    def clip(inputs, params, ctx):
        return {'table': inputs['table']}

    registry.register_node(manifest(entrypoint='plugins.clip'), logic=clip)
    assert registry.logic_for(registry.get('clip_values@1.0.0')) is clip


def test_unknown_node(registry):
    assert not registry.has('ghost@1.0.0')
    with pytest.raises(NotFoundError) as exc:
        registry.get('ghost@1.0.0')
    assert exc.value.code == 'UNKNOWN_NODE'
