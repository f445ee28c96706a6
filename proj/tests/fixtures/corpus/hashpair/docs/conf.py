project = 'docs'
