"""Point-cloud surface reconstruction via an attentive implicit field and RIMLS."""

__version__ = "0.1.0"
