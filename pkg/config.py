"""
Configuration management for the health telemetry data fabric.
"""
import json
import os
from pathlib import Path
from typing import Dict, Any, Optional
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()


class ConfigError(ValueError):
    """A setting that cannot be used as given."""


def parse_int_setting(key: str, value: Any) -> int:
    if isinstance(value, bool):
        raise ConfigError(f"{key} must be an integer, got {value!r}")
    try:
        return int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key} must be an integer, got {value!r}")


class Config:
    """Configuration class for managing fabric settings."""

    # Storage
    FABRIC_STORE_PATH = os.getenv('FABRIC_STORE_PATH', './fabric_store')
    FABRIC_DEFINITIONS_PATH = os.getenv(
        'FABRIC_DEFINITIONS_PATH',
        str(Path(__file__).resolve().parent / 'definitions')
    )

    # Deployment environment (hybrid deployments run one fabric per environment)
    FABRIC_ENVIRONMENT = os.getenv('FABRIC_ENVIRONMENT', 'local')

    # HTTP services
    FABRIC_LISTEN_ADDR = os.getenv('FABRIC_LISTEN_ADDR', '127.0.0.1:8080')
    FABRIC_CORS_ORIGINS = os.getenv('FABRIC_CORS_ORIGINS', 'http://localhost:3000')

    # Bearer token key material
    FABRIC_KEY_PATH = os.getenv('FABRIC_KEY_PATH')

    # Pipeline engine
    FABRIC_PIPELINE_WORKERS = os.getenv('FABRIC_PIPELINE_WORKERS', '1')
    FABRIC_NODE_RETRIES = os.getenv('FABRIC_NODE_RETRIES', '1')

    # Bearer token used by CLI queries and HTTP replay when --token is absent
    FABRIC_TOKEN = os.getenv('FABRIC_TOKEN')

    # Config file location fallback
    FABRIC_CONFIG = os.getenv('FABRIC_CONFIG')

    # Logging Configuration
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
    LOG_FORMAT = os.getenv('LOG_FORMAT', 'text')
    LOG_DIR = os.getenv('LOG_DIR')

    @classmethod
    def defaults(cls) -> Dict[str, Any]:
        """
        Settings as resolved from environment variables and built-in defaults.

        Returns:
            Dict keyed by config-file key names
        """
        return {
            'store_path': cls.FABRIC_STORE_PATH,
            'definitions_path': cls.FABRIC_DEFINITIONS_PATH,
            'environment': cls.FABRIC_ENVIRONMENT,
            'listen_addr': cls.FABRIC_LISTEN_ADDR,
            'cors_origins': [o.strip() for o in cls.FABRIC_CORS_ORIGINS.split(',') if o.strip()],
            'key_path': cls.FABRIC_KEY_PATH,
            'pipeline_workers': cls.FABRIC_PIPELINE_WORKERS,
            'node_retries': cls.FABRIC_NODE_RETRIES,
            'log_level': cls.LOG_LEVEL,
            'log_format': cls.LOG_FORMAT,
            'log_dir': cls.LOG_DIR,
        }

    @classmethod
    def validate_config(cls, settings: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        """
        Validate the configuration settings.

        Args:
            settings: Resolved settings; the class defaults when omitted

        Returns:
            Dict with validation results
        """
        settings = settings if settings is not None else cls.defaults()
        validation_result = {
            'is_valid': True,
            'errors': [],
            'warnings': []
        }

        if not settings.get('store_path'):
            validation_result['errors'].append('store_path is required')

        if not settings.get('environment'):
            validation_result['errors'].append('environment is required')

        addr = str(settings.get('listen_addr') or '')
        host, _, port = addr.rpartition(':')
        if not host or not port.isdigit() or not 0 < int(port) < 65536:
            validation_result['errors'].append(f'listen_addr must be host:port, got {addr!r}')

        try:
            workers = parse_int_setting('pipeline_workers', settings.get('pipeline_workers', 1))
            if workers <= 0:
                validation_result['errors'].append('pipeline_workers must be greater than 0')
            elif workers > 32:
                validation_result['warnings'].append('pipeline_workers is quite large (>32)')
        except ConfigError as e:
            validation_result['errors'].append(str(e))

        try:
            if parse_int_setting('node_retries', settings.get('node_retries', 0)) < 0:
                validation_result['errors'].append('node_retries must not be negative')
        except ConfigError as e:
            validation_result['errors'].append(str(e))

        if settings.get('log_format') not in ('text', 'json'):
            validation_result['errors'].append("log_format must be 'text' or 'json'")

        if not settings.get('key_path'):
            validation_result['warnings'].append('key_path not set; tokens verify against keys/token.key in the store')

        validation_result['is_valid'] = len(validation_result['errors']) == 0

        return validation_result

    @classmethod
    def get_config_summary(cls, settings: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        """
        Get a summary of current configuration.

        Returns:
            Dict with configuration summary
        """
        settings = settings if settings is not None else cls.defaults()
        return {
            'store_path': settings['store_path'],
            'environment': settings['environment'],
            'listen_addr': settings['listen_addr'],
            'key_material_set': bool(settings.get('key_path')),
            'pipeline_workers': settings['pipeline_workers'],
            'log_level': settings['log_level'],
        }

    @classmethod
    def create_env_template(cls, filepath: str = '.env.example') -> None:
        """
        Create an environment template file.

        Args:
            filepath: Path to create the template file
        """
        template_content = """# Storage
FABRIC_STORE_PATH=./fabric_store

# Deployment environment identifier
FABRIC_ENVIRONMENT=local

# HTTP services
FABRIC_LISTEN_ADDR=127.0.0.1:8080
FABRIC_CORS_ORIGINS=http://localhost:3000

# HMAC key file used to verify bearer tokens
FABRIC_KEY_PATH=./fabric_store/keys/token.key

# Optional: JSON config file (flags still win)
# FABRIC_CONFIG=./fabric.json

# Logging Configuration
LOG_LEVEL=INFO
LOG_FORMAT=text
"""

        with open(filepath, 'w') as f:
            f.write(template_content)


def load_fabric_config(config_path: Optional[str] = None,
                       overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """
    Resolve fabric settings.

    Precedence: overrides (CLI flags) > config file > environment > defaults.
    The config file is `config_path` or, failing that, `FABRIC_CONFIG`.

    Args:
        config_path: Path to a JSON config file
        overrides: Flag values; None entries are ignored

    Returns:
        Dict with resolved settings

    Raises:
        ConfigError: malformed config file or integer setting
    """
    settings = Config.defaults()

    path = config_path or os.getenv('FABRIC_CONFIG') or Config.FABRIC_CONFIG
    if path:
        with open(path, 'r', encoding='utf-8') as f:
            file_settings = json.load(f)
        if not isinstance(file_settings, dict):
            raise ConfigError(f'config file {path} must contain a JSON object')
        unknown = sorted(set(file_settings) - set(settings))
        if unknown:
            raise ConfigError(f'unknown config keys in {path}: {", ".join(unknown)}')
        settings.update(file_settings)

    for key, value in (overrides or {}).items():
        if value is not None:
            settings[key] = value

    settings['pipeline_workers'] = parse_int_setting('pipeline_workers', settings['pipeline_workers'])
    settings['node_retries'] = parse_int_setting('node_retries', settings['node_retries'])
    if isinstance(settings.get('cors_origins'), str):
        settings['cors_origins'] = [o.strip() for o in settings['cors_origins'].split(',') if o.strip()]
    return settings


def get_server_config(settings: Dict[str, Any]) -> Dict[str, Any]:
    """
    Get HTTP service configuration.

    Returns:
        Dict with host, port and CORS origins
    """
    host, _, port = str(settings['listen_addr']).rpartition(':')
    return {
        'host': host,
        'port': int(port),
        'cors_origins': settings['cors_origins'],
        'key_path': settings.get('key_path'),
        'log_level': settings['log_level'],
    }


# Validate configuration on import
_validation = Config.validate_config()
if not _validation['is_valid']:
    import warnings
    warnings.warn(f"Configuration validation failed: {_validation['errors']}")
