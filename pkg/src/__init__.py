"""NODE-GAM / NODE-GA2M: training, pretraining, inference and explanations."""
