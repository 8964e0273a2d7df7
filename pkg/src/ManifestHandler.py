import contextlib
import json
import os
import time

import joblib
import numpy as np
import pandas as pd
import scipy
import tensorboardX
import torch
import tqdm
import yaml

class ManifestHandler:
    def __init__(self, path, module_id):
        self.path = path
        self.module_id = module_id
        if os.path.exists(self.path):
            with open(self.path, 'r') as mf:
                self.data = json.load(mf)
        else:
            self.data = {}
        # every run of a module replaces its entry
        self.data[self.module_id] = {'config_hash': None, 'seed': None,
            'versions': self.versions(), 'timings': {}, 'effective': {}, 'status': 'running'}
        self.entry = self.data[self.module_id]
        self._save()

    @staticmethod
    def versions():
        return {'torch': torch.__version__, 'numpy': np.__version__,
            'scipy': scipy.__version__, 'pandas': pd.__version__, 'yaml': yaml.__version__,
            'tensorboardX': tensorboardX.__version__, 'tqdm': tqdm.__version__,
            'joblib': joblib.__version__}

    def set_run(self, config_hash, seed, config_path):
        self.entry['config_hash'] = config_hash
        self.entry['seed'] = seed
        self.entry['config'] = config_path
        self._save()

    def set_effective(self, effective):
        '''
        Record every parameter value the run used, defaults included.
        '''
        self.entry['effective'] = json.loads(json.dumps(effective, default=str))
        self._save()

    def record(self, key, val):
        self.entry[key] = val
        self._save()

    @contextlib.contextmanager
    def timer(self, phase):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.entry['timings'][phase] = time.perf_counter() - start
            self._save()

    def _save(self):
        '''
        Saves the current version of the manifest to the assigned path
        '''
        with open(self.path, 'w') as mf:
            json.dump(self.data, mf, indent=2, sort_keys=True)
