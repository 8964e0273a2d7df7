import os

import pandas as pd
from tensorboardX import SummaryWriter

class LogHandler:
    def __init__(self, logdir, module_id, csv_path=None):
        '''
        Input arguments:
        * logdir (str): Directory of the tensorboard event files
        * module_id (str): Prefix of every key
        * csv_path (str): Where save() writes the metrics rows
        '''
        self.logdir = logdir
        self.log = SummaryWriter(self.logdir)
        self.module_id = module_id
        self.csv_path = csv_path
        self.rows = []

    def scalar(self, key, val, step, **labels):
        '''
        val can either be a scalar or a dictionary e.g.
        {'a': 3, 'b': 2} to plot e.g. the values of a and b
        onto the same graph. Every value is also kept as a metrics
        row, extra keyword labels (e.g. eps=0.5) become columns.
        '''
        tag = '{}_{}'.format(self.module_id, key)
        if isinstance(val, dict):
            self.log.add_scalars(tag, {k: float(v) for k, v in val.items()}, step)
            for k, v in val.items():
                self._row('{}/{}'.format(key, k), v, step, labels)
        else:
            self.log.add_scalar(tag, float(val), step)
            self._row(key, val, step, labels)

    def text(self, key, val, step):
        self.log.add_text('{}_{}'.format(self.module_id, key), val, step)

    def table(self, key, frame:pd.DataFrame, path, step=0):
        '''
        Write a result table as CSV and log its header line.
        '''
        parent = os.path.dirname(path)
        if parent and not os.path.exists(parent):
            os.makedirs(parent)
        frame.to_csv(path, index=False)
        self.text(key, '{} rows x [{}] -> {}'.format(len(frame), ', '.join(frame.columns), path),
            step)

    def _row(self, key, val, step, labels):
        row = {'module': self.module_id, 'key': key, 'step': step, 'value': float(val)}
        row.update(labels)
        self.rows.append(row)

    def save(self):
        '''
        Merge the rows into the metrics CSV, keeping the rows that other
        modules wrote there.
        '''
        if self.csv_path is None or not self.rows:
            return
        frame = pd.DataFrame(self.rows)
        if os.path.exists(self.csv_path):
            old = pd.read_csv(self.csv_path)
            old = old[old['module'] != self.module_id]
            frame = pd.concat([old, frame], ignore_index=True)
        frame.to_csv(self.csv_path, index=False)

    def close(self):
        self.save()
        self.log.close()
