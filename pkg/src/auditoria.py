"""Registro de corridas con cadena de hashes para trazabilidad de campañas"""
import hashlib
import json
import threading
from collections import namedtuple

from errors import DataError

RegistroCorrida = namedtuple('RegistroCorrida', ['datos', 'hash_previo', 'hash_actual'])

CAMPOS_HASH = ('hash_previo', 'hash')


def calcular_hash(datos, hash_previo):
    """SHA-256 sobre el JSON canónico de los datos y el hash previo"""
    datos_str = json.dumps(datos, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(f"{hash_previo}|{datos_str}".encode('utf-8')).hexdigest()


HASH_GENESIS = calcular_hash({'genesis': 'runs'}, '')


class SistemaAuditoria:
    """
    Escritor de runs.jsonl: cada línea lleva el hash de la anterior

    Las escrituras se serializan con un candado, así varios hilos de una
    campaña pueden registrar corridas sobre el mismo archivo.
    """

    def __init__(self, ruta=None):
        self.ruta = ruta
        self.registros = []
        self.hash_genesis = HASH_GENESIS
        self._lock = threading.Lock()
        self._archivo = open(ruta, 'w', encoding='utf-8') if ruta else None

    def registrar_corrida(self, datos):
        """
        Registra una corrida y la escribe en el archivo si lo hay

        Returns:
            Hash de la nueva línea
        """
        datos = {k: v for k, v in datos.items() if k not in CAMPOS_HASH}
        with self._lock:
            hash_previo = self.registros[-1].hash_actual if self.registros else self.hash_genesis
            hash_actual = calcular_hash(datos, hash_previo)
            self.registros.append(RegistroCorrida(datos, hash_previo, hash_actual))
            if self._archivo:
                linea = dict(datos, hash_previo=hash_previo, hash=hash_actual)
                self._archivo.write(json.dumps(linea, sort_keys=True) + '\n')
                self._archivo.flush()
        return hash_actual

    def verificar_integridad(self, verbose=False):
        """True si la cadena en memoria no fue alterada"""
        return verificar_cadena([dict(r.datos, hash_previo=r.hash_previo, hash=r.hash_actual)
                                 for r in self.registros], verbose)

    def imprimir_resumen(self):
        """Resumen de corridas por método"""
        print("\n" + "=" * 70)
        print("RESUMEN DE AUDITORÍA")
        print("=" * 70)
        print(f"Total de corridas registradas: {len(self.registros)}")
        metodos = {}
        for r in self.registros:
            metodos[r.datos.get('method')] = metodos.get(r.datos.get('method'), 0) + 1
        print("\nCorridas por método:")
        for metodo, count in sorted(metodos.items(), key=lambda item: str(item[0])):
            print(f"  {metodo}: {count}")
        if self.registros:
            print(f"\nÚltimo hash: {self.registros[-1].hash_actual[:16]}...")
        print("=" * 70)

    def cerrar(self):
        with self._lock:
            if self._archivo:
                self._archivo.close()
                self._archivo = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.cerrar()
        return False


def verificar_cadena(lineas, verbose=False):
    """
    Verifica los hashes encadenados de una lista de líneas

    Retorna True si la cadena es válida, False si fue alterada
    """
    if verbose:
        print("\n" + "=" * 70)
        print("VERIFICACIÓN DE INTEGRIDAD DE AUDITORÍA")
        print("=" * 70)
    esperado = HASH_GENESIS
    for i, linea in enumerate(lineas):
        if linea.get('hash_previo') != esperado:
            if verbose:
                print(f"  ✗ Corrida {i}: hash previo inválido")
            return False
        datos = {k: v for k, v in linea.items() if k not in CAMPOS_HASH}
        if calcular_hash(datos, esperado) != linea.get('hash'):
            if verbose:
                print(f"  ✗ Corrida {i}: hash no coincide (posible alteración)")
            return False
        esperado = linea['hash']
    if verbose:
        print(f"  ✓ {len(lineas)} corridas verificadas correctamente")
        print("  ✓ Cadena de auditoría íntegra")
        print("=" * 70)
    return True


def leer_corridas(ruta):
    """
    Lee runs.jsonl

    Returns:
        (lista de diccionarios sin campos de hash, cadena íntegra)
    """
    lineas = []
    try:
        with open(ruta, encoding='utf-8') as f:
            for numero, texto in enumerate(f, 1):
                if not texto.strip():
                    continue
                try:
                    lineas.append(json.loads(texto))
                except json.JSONDecodeError as exc:
                    raise DataError(f"{ruta}:{numero}: JSON inválido ({exc})")
    except OSError as exc:
        raise DataError(f"No se pudo leer {ruta}: {exc}")
    integra = verificar_cadena(lineas)
    registros = [{k: v for k, v in linea.items() if k not in CAMPOS_HASH} for linea in lineas]
    return registros, integra
