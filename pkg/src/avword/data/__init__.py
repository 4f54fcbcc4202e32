from .io import Sample, load_sample, store_sample
