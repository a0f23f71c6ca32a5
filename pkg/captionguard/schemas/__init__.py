# Pydantic schemas for traces, mentions, models and reports
