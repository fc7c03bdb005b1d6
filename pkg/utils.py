import re
import math
import unicodedata

import numpy as np
import pandas as pd


def json_safe(obj):
    """
    Rend un objet compatible JSON : types numpy convertis en types Python,
    NaN et Inf remplacés par None, tableaux convertis en listes.
    """
    if isinstance(obj, dict):
        return {str(k): json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [json_safe(v) for v in obj.tolist()]

    if obj is None:
        return None
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        if math.isnan(value) or math.isinf(value):
            return None
        return value
    if isinstance(obj, pd.Timestamp):
        if pd.isna(obj):
            return None
        return obj.isoformat()
    return obj


def snake_case(text):
    """
    Convertit un texte en snake_case.
    Ex: "K-Range" -> "k_range", "Log Level" -> "log_level"
    Sert à normaliser les clés du fichier de configuration et des options CLI.
    """
    if not text:
        return text
    text = str(text)

    # Supprimer les accents
    text = unicodedata.normalize('NFKD', text)
    text = ''.join(c for c in text if unicodedata.category(c) != 'Mn')

    text = re.sub(r'[\s\-\.]+', '_', text.strip())
    text = re.sub(r'[^a-zA-Z0-9_]', '', text)
    return text.lower().strip('_')


def parse_int_range(value):
    """
    Lit une plage d'entiers inclusive : "1..40", "3", "2-5" ou "1,2,5".
    Retourne la liste triée des entiers.
    """
    if isinstance(value, (list, tuple, range)):
        values = sorted({int(v) for v in value})
    else:
        text = str(value).strip()
        if not text:
            raise ValueError("Plage d'entiers vide")
        match = re.fullmatch(r'(-?\d+)\s*(?:\.\.|-)\s*(-?\d+)', text)
        if match:
            low, high = int(match.group(1)), int(match.group(2))
            if low > high:
                raise ValueError(f"Plage mal ordonnée: {text}")
            values = list(range(low, high + 1))
        else:
            try:
                values = sorted({int(v) for v in re.split(r'[,;\s]+', text) if v})
            except ValueError:
                raise ValueError(f"Plage d'entiers invalide: {text}")
    if not values:
        raise ValueError(f"Plage d'entiers vide: {value}")
    return values


def parse_float_list(value):
    """Lit une liste de réels séparés par des virgules ("0,0.5,1")."""
    if isinstance(value, (list, tuple)):
        return [float(v) for v in value]
    text = str(value).strip()
    try:
        return [float(v) for v in re.split(r'[,;\s]+', text) if v]
    except ValueError:
        raise ValueError(f"Liste de réels invalide: {text}")
