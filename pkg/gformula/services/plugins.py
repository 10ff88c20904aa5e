import importlib
import logging
from typing import Any

from gformula.errors import GFormulaError

logger = logging.getLogger(__name__)


class PluginContractError(GFormulaError):
    module = "covariate_engine"


def load_plugin(path: str) -> Any:
    """Resolve a `package.module:attribute` reference"""
    module_name, _, attribute = path.partition(":")
    if not module_name or not attribute:
        raise PluginContractError(f"plugin reference '{path}' must look like 'module:attribute'")
    try:
        module = importlib.import_module(module_name)
    except ImportError as e:
        raise PluginContractError(f"cannot import plugin module '{module_name}': {e}") from e
    try:
        plugin = getattr(module, attribute)
    except AttributeError as e:
        raise PluginContractError(f"module '{module_name}' has no attribute '{attribute}'") from e
    logger.debug(f"Loaded plugin {path}")
    return plugin
