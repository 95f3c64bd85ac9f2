"""Excepciones del sistema de evaluación de sobrecargas"""


class AdequacyError(ValueError):
    """Error base de la evaluación de adecuación"""


class ConfigurationError(AdequacyError):
    """Especificación, configuración o argumentos inválidos"""


class DataError(AdequacyError):
    """Referencias faltantes o archivos de datos corruptos"""


class StateError(AdequacyError):
    """Operación invocada sobre un objeto en estado incorrecto"""


class DegenerateDistributionError(AdequacyError):
    """Distribución de muestreo con probabilidades 0 o 1"""


class EliteSetEmptyError(AdequacyError):
    """El conjunto élite de la actualización CE no tiene masa"""
