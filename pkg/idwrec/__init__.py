# idwrec package marker
