from .exporter import (DEFAULT_MODEL, ExportJob, ModelUnavailable,
                       encode_phrases, finetune_mlm, load_model, mlm_loss,
                       run_export, write_embedding_file)

__version__ = "0.1.0"

__all__ = ["DEFAULT_MODEL", "ExportJob", "ModelUnavailable", "encode_phrases",
           "finetune_mlm", "load_model", "mlm_loss", "run_export",
           "write_embedding_file", "__version__"]
